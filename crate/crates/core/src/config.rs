//! Daemon configuration and the file formats it references.
//!
//! The top-level config is TOML; every path in it is resolved relative to
//! the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypovisor::NamespaceId;
use crate::identity::{ClientManifest, ManifestError};
use crate::macguard::{self, Conflict, Ruleset, RulesetError};
use crate::policy::{GroupTable, PolicyError, PolicySet};

/// One service instance started at boot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootEntry {
    pub name: String,
    pub namespace: NamespaceId,
    pub plugin: String,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootManifestError {
    #[error("line {0}: expected `name namespace plugin key=value...`")]
    Parse(usize),
    #[error("line {line}: bad parameter `{token}`")]
    BadParam { line: usize, token: String },
}

/// Parses a boot manifest: `name namespace plugin key=value...` per line.
pub fn parse_boot_manifest(text: &str) -> Result<Vec<BootEntry>, BootManifestError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut fields = content.split_whitespace();
        let (Some(name), Some(ns), Some(plugin)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(BootManifestError::Parse(line));
        };
        let namespace = ns.parse::<u32>().map_err(|_| BootManifestError::Parse(line))?;
        let mut params = BTreeMap::new();
        for token in fields {
            let Some((k, v)) = token.split_once('=').filter(|(k, _)| !k.is_empty()) else {
                return Err(BootManifestError::BadParam { line, token: token.to_string() });
            };
            params.insert(k.to_string(), v.to_string());
        }
        entries.push(BootEntry {
            name: name.to_string(),
            namespace: NamespaceId(namespace),
            plugin: plugin.to_string(),
            params,
        });
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaemonConfig {
    /// Transport address: `host:port` for TCP or `unix:/path` for a local socket.
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default = "default_admin")]
    pub admin_http: String,
    #[serde(default)]
    pub admin_token: Option<String>,
    pub nspolicy: PathBuf,
    pub groups: PathBuf,
    pub transfer_rules: PathBuf,
    pub boot_manifest: PathBuf,
    pub clients: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_listen() -> String {
    "127.0.0.1:7700".into()
}

fn default_admin() -> String {
    "127.0.0.1:7878".into()
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Policy { path: PathBuf, source: PolicyError },
    #[error("{path}: {source}")]
    Clients { path: PathBuf, source: ManifestError },
    #[error("{path}: {source}")]
    Rules { path: PathBuf, source: RulesetError },
    #[error("{path}: {source}")]
    Boot { path: PathBuf, source: BootManifestError },
    #[error("transfer ruleset has {} conflict(s): {}", .0.len(), .0.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; "))]
    RuleConflicts(Vec<Conflict>),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

impl DaemonConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read(path)?;
        let mut cfg: DaemonConfig = toml::from_str(&text).map_err(|e| ConfigError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.nspolicy,
            &mut cfg.groups,
            &mut cfg.transfer_rules,
            &mut cfg.boot_manifest,
            &mut cfg.clients,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Reads and parses every referenced file. Fails on the first defect,
    /// including transfer-rule conflicts.
    pub fn load_files(&self) -> Result<LoadedConfig, ConfigError> {
        let policy = PolicySet::parse(&read(&self.nspolicy)?)
            .map_err(|source| ConfigError::Policy { path: self.nspolicy.clone(), source })?;
        let groups = GroupTable::parse(&read(&self.groups)?)
            .map_err(|source| ConfigError::Policy { path: self.groups.clone(), source })?;
        let ruleset = macguard::parse_ruleset(&read(&self.transfer_rules)?)
            .map_err(|source| ConfigError::Rules { path: self.transfer_rules.clone(), source })?;
        let conflicts = macguard::validate_ruleset(&ruleset);
        if !conflicts.is_empty() {
            return Err(ConfigError::RuleConflicts(conflicts));
        }
        let boot = parse_boot_manifest(&read(&self.boot_manifest)?)
            .map_err(|source| ConfigError::Boot { path: self.boot_manifest.clone(), source })?;
        let clients = ClientManifest::parse(&read(&self.clients)?)
            .map_err(|source| ConfigError::Clients { path: self.clients.clone(), source })?;
        Ok(LoadedConfig { policy, groups, ruleset, boot, clients })
    }
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub policy: PolicySet,
    pub groups: GroupTable,
    pub ruleset: Ruleset,
    pub boot: Vec<BootEntry>,
    pub clients: ClientManifest,
}
