//! The namespace policy: flat `(uid, service, namespace)` rules plus the
//! container groups the console assigns as a unit.
//!
//! `nspolicy` grammar, one rule per line:
//!
//! ```text
//! # comment
//! 10001 location 1
//! ```
//!
//! `groups.conf` grammar, one binding per line: `group_name service namespace`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypovisor::NamespaceId;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolicyRule {
    pub uid: u32,
    pub service_name: String,
    pub namespace: NamespaceId,
}

impl PolicyRule {
    pub fn new(uid: u32, service_name: impl Into<String>, namespace: impl Into<NamespaceId>) -> Self {
        Self {
            uid,
            service_name: service_name.into(),
            namespace: namespace.into(),
        }
    }
}

impl fmt::Display for PolicyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.uid, self.service_name, self.namespace)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("line {0}: malformed policy line")]
    Parse(usize),
    #[error("line {0}: duplicate rule for the same uid and service")]
    DuplicateRule(usize),
    #[error("no such group `{0}`")]
    NoSuchGroup(String),
    #[error("groups line {0}: expected `group_name service namespace`")]
    GroupParse(usize),
    #[error("groups line {line}: group `{group}` binds `{service}` twice")]
    DuplicateBinding {
        line: usize,
        group: String,
        service: String,
    },
    #[error("failed to persist policy: {0}")]
    Persist(String),
}

/// One mutation of the policy. Each applied update bumps the version once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PolicyUpdate {
    SetRule(PolicyRule),
    RemoveRule { uid: u32, service_name: String },
    AssignGroup { uid: u32, group: String },
    ClearUid { uid: u32 },
}

/// Immutable policy snapshot. Rules are kept in canonical `(uid, service)`
/// order, and lookups scan them linearly the way the stock service manager
/// walks its policy file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySet {
    rules: Vec<PolicyRule>,
    version: u64,
}

impl PolicySet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a set from rules, rejecting duplicate `(uid, service)` keys.
    /// The error carries the 1-based position of the offending rule.
    pub fn from_rules(rules: impl IntoIterator<Item = PolicyRule>) -> Result<Self, PolicyError> {
        let mut keyed = BTreeMap::new();
        for (idx, rule) in rules.into_iter().enumerate() {
            let key = (rule.uid, rule.service_name.clone());
            if keyed.insert(key, rule).is_some() {
                return Err(PolicyError::DuplicateRule(idx + 1));
            }
        }
        Ok(Self {
            rules: keyed.into_values().collect(),
            version: 0,
        })
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut keyed: BTreeMap<(u32, String), PolicyRule> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let [uid, service, ns] = fields[..] else {
                return Err(PolicyError::Parse(line));
            };
            let uid = parse_digits(uid).ok_or(PolicyError::Parse(line))?;
            let ns = parse_digits(ns).ok_or(PolicyError::Parse(line))?;
            let rule = PolicyRule::new(uid, service, ns);
            if keyed.insert((uid, service.to_string()), rule).is_some() {
                return Err(PolicyError::DuplicateRule(line));
            }
        }
        Ok(Self {
            rules: keyed.into_values().collect(),
            version: 0,
        })
    }

    /// Canonical text form: sorted by `(uid, service)`, one rule per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for rule in &self.rules {
            out.push_str(&rule.to_string());
            out.push('\n');
        }
        out
    }

    pub fn rules(&self) -> &[PolicyRule] {
        &self.rules
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Namespace assigned to `(uid, service_name)`, or the global namespace.
    pub fn lookup_rule(&self, uid: u32, service_name: &str) -> NamespaceId {
        self.rules
            .iter()
            .find(|r| r.uid == uid && r.service_name == service_name)
            .map(|r| r.namespace)
            .unwrap_or(NamespaceId::GLOBAL)
    }

    pub fn rules_for_uid(&self, uid: u32) -> impl Iterator<Item = &PolicyRule> {
        self.rules.iter().filter(move |r| r.uid == uid)
    }

    pub fn apply_update(&self, update: &PolicyUpdate, groups: &GroupTable) -> Result<Self, PolicyError> {
        let mut next = self.clone();
        match update {
            PolicyUpdate::SetRule(rule) => next.set_rule(rule.clone()),
            PolicyUpdate::RemoveRule { uid, service_name } => {
                next.rules
                    .retain(|r| !(r.uid == *uid && r.service_name == *service_name));
            }
            PolicyUpdate::ClearUid { uid } => next.rules.retain(|r| r.uid != *uid),
            PolicyUpdate::AssignGroup { uid, group } => {
                let group = groups
                    .get(group)
                    .ok_or_else(|| PolicyError::NoSuchGroup(group.clone()))?;
                next.rules.retain(|r| r.uid != *uid);
                for (service, ns) in &group.bindings {
                    next.set_rule(PolicyRule::new(*uid, service.clone(), *ns));
                }
            }
        }
        next.version = self.version + 1;
        Ok(next)
    }

    fn set_rule(&mut self, rule: PolicyRule) {
        let key = (rule.uid, rule.service_name.as_str());
        match self
            .rules
            .binary_search_by(|r| (r.uid, r.service_name.as_str()).cmp(&key))
        {
            Ok(pos) => self.rules[pos] = rule,
            Err(pos) => self.rules.insert(pos, rule),
        }
    }

    /// Reports rules and group bindings that point at unregistered instances.
    pub fn validate(&self, registry: &[(String, NamespaceId)], groups: &GroupTable) -> Vec<Diagnostic> {
        let registered = |service: &str, ns: NamespaceId| {
            registry.iter().any(|(name, n)| name == service && *n == ns)
        };
        let mut out = Vec::new();
        for rule in &self.rules {
            if !registered(&rule.service_name, rule.namespace) {
                out.push(Diagnostic::UnregisteredRule { rule: rule.clone() });
            }
        }
        for group in groups.iter() {
            for (service, ns) in &group.bindings {
                if !registered(service, *ns) {
                    out.push(Diagnostic::UnregisteredBinding {
                        group: group.name.clone(),
                        service: service.clone(),
                        namespace: *ns,
                    });
                }
            }
        }
        out
    }
}

fn parse_digits(s: &str) -> Option<u32> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    UnregisteredRule { rule: PolicyRule },
    UnregisteredBinding {
        group: String,
        service: String,
        namespace: NamespaceId,
    },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnregisteredRule { rule } => write!(
                f,
                "warning: rule `{rule}` targets unregistered instance {}/{}",
                rule.service_name, rule.namespace
            ),
            Diagnostic::UnregisteredBinding {
                group,
                service,
                namespace,
            } => write!(
                f,
                "warning: group `{group}` binds unregistered instance {service}/{namespace}"
            ),
        }
    }
}

/// A named bundle of `(service, namespace)` bindings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerGroup {
    pub name: String,
    pub bindings: Vec<(String, NamespaceId)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupTable {
    groups: BTreeMap<String, ContainerGroup>,
}

impl GroupTable {
    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut groups: BTreeMap<String, ContainerGroup> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            let [name, service, ns] = fields[..] else {
                return Err(PolicyError::GroupParse(line));
            };
            let ns = parse_digits(ns).ok_or(PolicyError::GroupParse(line))?;
            let group = groups.entry(name.to_string()).or_insert_with(|| ContainerGroup {
                name: name.to_string(),
                bindings: Vec::new(),
            });
            if group.bindings.iter().any(|(s, _)| s == service) {
                return Err(PolicyError::DuplicateBinding {
                    line,
                    group: name.to_string(),
                    service: service.to_string(),
                });
            }
            group.bindings.push((service.to_string(), NamespaceId(ns)));
        }
        Ok(Self { groups })
    }

    pub fn from_groups(groups: impl IntoIterator<Item = ContainerGroup>) -> Self {
        Self {
            groups: groups.into_iter().map(|g| (g.name.clone(), g)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ContainerGroup> {
        self.groups.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ContainerGroup> {
        self.groups.values()
    }
}

/// The live policy: an atomically swapped snapshot plus a single writer
/// path. Readers never observe a partially applied update.
pub struct PolicyStore {
    current: RwLock<Arc<PolicySet>>,
    groups: Arc<GroupTable>,
    writer: Mutex<()>,
    persist_path: Option<PathBuf>,
}

impl PolicyStore {
    pub fn new(initial: PolicySet, groups: GroupTable) -> Self {
        Self {
            current: RwLock::new(Arc::new(initial)),
            groups: Arc::new(groups),
            writer: Mutex::new(()),
            persist_path: None,
        }
    }

    /// Rewrite `path` after every applied update.
    pub fn with_persistence(mut self, path: impl Into<PathBuf>) -> Self {
        self.persist_path = Some(path.into());
        self
    }

    pub fn snapshot(&self) -> Arc<PolicySet> {
        self.current.read().clone()
    }

    pub fn groups(&self) -> &GroupTable {
        &self.groups
    }

    pub fn apply(&self, update: &PolicyUpdate) -> Result<Arc<PolicySet>, PolicyError> {
        let _guard = self.writer.lock();
        let next = Arc::new(self.snapshot().apply_update(update, &self.groups)?);
        if let Some(path) = &self.persist_path {
            write_atomically(path, &next.serialize())
                .map_err(|e| PolicyError::Persist(e.to_string()))?;
        }
        *self.current.write() = next.clone();
        Ok(next)
    }
}

fn write_atomically(path: &Path, contents: &str) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "nspolicy".into());
    let tmp = dir.join(format!(".{file_name}.tmp"));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
