//! Service directory with a per-request namespace dispatch on its lookup
//! path.
//!
//! Every named service has a global instance (namespace 0) and optionally
//! virtual instances. A lookup consults the live policy on every call and
//! hands back whichever instance the caller's uid is assigned to.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::endpoint::ServiceEndpoint;
use crate::identity::{ClientIdentity, SecurityLabel};
use crate::policy::{PolicySet, PolicyStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NamespaceId(pub u32);

impl NamespaceId {
    pub const GLOBAL: NamespaceId = NamespaceId(0);

    pub fn is_global(self) -> bool {
        self == Self::GLOBAL
    }
}

impl From<u32> for NamespaceId {
    fn from(v: u32) -> Self {
        NamespaceId(v)
    }
}

impl fmt::Display for NamespaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Global registry key. Key 0 is the registry itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceKey(pub u64);

impl ServiceKey {
    pub const REGISTRY: ServiceKey = ServiceKey(0);
}

pub struct ServiceRecord {
    pub name: String,
    pub namespace: NamespaceId,
    pub key: ServiceKey,
    pub owner_label: SecurityLabel,
    pub endpoint: Arc<dyn ServiceEndpoint>,
}

impl fmt::Debug for ServiceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceRecord")
            .field("name", &self.name)
            .field("namespace", &self.namespace)
            .field("key", &self.key)
            .field("owner_label", &self.owner_label)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HypovisorError {
    #[error("permission denied")]
    PermissionDenied,
    #[error("service {name}/{namespace} is already registered")]
    AlreadyRegistered { name: String, namespace: NamespaceId },
    #[error("service `{0}` has no global instance")]
    GlobalMissing(String),
    #[error("no such service `{0}`")]
    NoSuchService(String),
}

/// Namespace assigned to `(uid, name)` by `policy`, or the global namespace.
pub fn resolve_namespace(policy: &PolicySet, uid: u32, name: &str) -> NamespaceId {
    policy.lookup_rule(uid, name)
}

#[derive(Default)]
struct Registry {
    by_name: BTreeMap<(String, NamespaceId), ServiceKey>,
    records: HashMap<ServiceKey, Arc<ServiceRecord>>,
    next_key: u64,
}

impl Registry {
    fn alloc_key(&mut self) -> ServiceKey {
        self.next_key += 1;
        ServiceKey(self.next_key)
    }
}

/// Outcome of one lookup.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub record: Arc<ServiceRecord>,
    /// Namespace the policy asked for. Differs from `record.namespace` when
    /// the target was not registered and the lookup fell back to global.
    pub requested: NamespaceId,
}

pub struct Hypovisor {
    registry: RwLock<Registry>,
    policy: Arc<PolicyStore>,
}

impl Hypovisor {
    pub fn new(policy: Arc<PolicyStore>) -> Self {
        Self {
            registry: RwLock::new(Registry::default()),
            policy,
        }
    }

    pub fn policy(&self) -> &Arc<PolicyStore> {
        &self.policy
    }

    pub fn add_service(
        &self,
        caller: &ClientIdentity,
        name: &str,
        namespace: NamespaceId,
        endpoint: Arc<dyn ServiceEndpoint>,
    ) -> Result<ServiceKey, HypovisorError> {
        if caller.label != SecurityLabel::System {
            return Err(HypovisorError::PermissionDenied);
        }
        let mut reg = self.registry.write();
        if reg.by_name.contains_key(&(name.to_string(), namespace)) {
            return Err(HypovisorError::AlreadyRegistered {
                name: name.to_string(),
                namespace,
            });
        }
        if !namespace.is_global() && !reg.by_name.contains_key(&(name.to_string(), NamespaceId::GLOBAL)) {
            return Err(HypovisorError::GlobalMissing(name.to_string()));
        }
        let key = reg.alloc_key();
        reg.by_name.insert((name.to_string(), namespace), key);
        reg.records.insert(
            key,
            Arc::new(ServiceRecord {
                name: name.to_string(),
                namespace,
                key,
                owner_label: SecurityLabel::System,
                endpoint,
            }),
        );
        Ok(key)
    }

    /// Records an unnamed node created by a client. It is reachable only
    /// through handles, never through lookup.
    pub fn add_node(&self, owner: &ClientIdentity, endpoint: Arc<dyn ServiceEndpoint>) -> ServiceKey {
        let mut reg = self.registry.write();
        let key = reg.alloc_key();
        reg.records.insert(
            key,
            Arc::new(ServiceRecord {
                name: format!("node:{}", owner.uid),
                namespace: NamespaceId::GLOBAL,
                key,
                owner_label: owner.label,
                endpoint,
            }),
        );
        key
    }

    pub fn record(&self, key: ServiceKey) -> Option<Arc<ServiceRecord>> {
        self.registry.read().records.get(&key).cloned()
    }

    /// Resolves `name` for `uid` against a fresh policy snapshot.
    pub fn lookup(&self, uid: u32, name: &str) -> Result<Resolution, HypovisorError> {
        let policy = self.policy.snapshot();
        let reg = self.registry.read();
        let global = reg
            .by_name
            .get(&(name.to_string(), NamespaceId::GLOBAL))
            .copied()
            .ok_or_else(|| HypovisorError::NoSuchService(name.to_string()))?;
        let requested = resolve_namespace(&policy, uid, name);
        let key = if requested.is_global() {
            global
        } else {
            match reg.by_name.get(&(name.to_string(), requested)) {
                Some(k) => *k,
                None => {
                    warn!(uid, service = name, namespace = %requested, "policy targets unregistered namespace; using global");
                    global
                }
            }
        };
        Ok(Resolution {
            record: reg.records[&key].clone(),
            requested,
        })
    }

    pub fn list_services(&self, caller: &ClientIdentity) -> Result<Vec<(String, NamespaceId)>, HypovisorError> {
        if caller.label != SecurityLabel::System {
            return Err(HypovisorError::PermissionDenied);
        }
        Ok(self.registry_snapshot())
    }

    /// Sorted `(name, namespace)` pairs of every named registration.
    pub fn registry_snapshot(&self) -> Vec<(String, NamespaceId)> {
        self.registry.read().by_name.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::EchoEndpoint;
    use crate::policy::{GroupTable, PolicyRule, PolicyUpdate};

    const SYSTEM: ClientIdentity = ClientIdentity { uid: 1000, label: SecurityLabel::System };
    const APP: ClientIdentity = ClientIdentity { uid: 10001, label: SecurityLabel::UntrustedApp };

    fn hypovisor(policy: &str) -> Hypovisor {
        let store = PolicyStore::new(PolicySet::parse(policy).unwrap(), GroupTable::default());
        Hypovisor::new(Arc::new(store))
    }

    fn echo() -> Arc<dyn ServiceEndpoint> {
        Arc::new(EchoEndpoint)
    }

    #[test]
    fn add_service_contract() {
        let h = hypovisor("");
        assert_eq!(
            h.add_service(&SYSTEM, "location", NamespaceId(1), echo()),
            Err(HypovisorError::GlobalMissing("location".into()))
        );
        for ns in 0..3 {
            h.add_service(&SYSTEM, "location", NamespaceId(ns), echo()).unwrap();
        }
        assert_eq!(h.registry_snapshot().len(), 3);
        assert_eq!(
            h.add_service(&APP, "evil", NamespaceId(0), echo()),
            Err(HypovisorError::PermissionDenied)
        );
        assert!(matches!(
            h.add_service(&SYSTEM, "location", NamespaceId(1), echo()),
            Err(HypovisorError::AlreadyRegistered { .. })
        ));
    }

    #[test]
    fn lookup_follows_policy_and_falls_back() {
        let h = hypovisor("10001 location 1\n10002 location 9");
        h.add_service(&SYSTEM, "location", NamespaceId(0), echo()).unwrap();
        h.add_service(&SYSTEM, "location", NamespaceId(1), echo()).unwrap();
        assert_eq!(h.lookup(10001, "location").unwrap().record.namespace, NamespaceId(1));
        assert_eq!(h.lookup(10003, "location").unwrap().record.namespace, NamespaceId(0));
        let fallback = h.lookup(10002, "location").unwrap();
        assert_eq!(fallback.record.namespace, NamespaceId(0));
        assert_eq!(fallback.requested, NamespaceId(9));
        assert_eq!(
            h.lookup(10001, "camera").unwrap_err(),
            HypovisorError::NoSuchService("camera".into())
        );
    }

    #[test]
    fn lookups_see_policy_updates_immediately() {
        let h = hypovisor("");
        h.add_service(&SYSTEM, "location", NamespaceId(0), echo()).unwrap();
        h.add_service(&SYSTEM, "location", NamespaceId(1), echo()).unwrap();
        assert_eq!(h.lookup(10001, "location").unwrap().record.namespace, NamespaceId(0));
        h.policy()
            .apply(&PolicyUpdate::SetRule(PolicyRule::new(10001, "location", 1)))
            .unwrap();
        assert_eq!(h.lookup(10001, "location").unwrap().record.namespace, NamespaceId(1));
        h.policy().apply(&PolicyUpdate::ClearUid { uid: 10001 }).unwrap();
        assert_eq!(h.lookup(10001, "location").unwrap().record.namespace, NamespaceId(0));
    }

    #[test]
    fn list_services_is_sorted_and_admin_only() {
        let h = hypovisor("");
        assert!(h.list_services(&SYSTEM).unwrap().is_empty());
        h.add_service(&SYSTEM, "sensors", NamespaceId(0), echo()).unwrap();
        h.add_service(&SYSTEM, "location", NamespaceId(0), echo()).unwrap();
        h.add_service(&SYSTEM, "location", NamespaceId(2), echo()).unwrap();
        assert_eq!(
            h.list_services(&SYSTEM).unwrap(),
            vec![
                ("location".to_string(), NamespaceId(0)),
                ("location".to_string(), NamespaceId(2)),
                ("sensors".to_string(), NamespaceId(0)),
            ]
        );
        assert_eq!(h.list_services(&APP), Err(HypovisorError::PermissionDenied));
    }

    #[test]
    fn resolve_namespace_examples() {
        assert_eq!(resolve_namespace(&PolicySet::empty(), 3, "x"), NamespaceId(0));
        let p = PolicySet::parse("10001 location 1").unwrap();
        assert_eq!(resolve_namespace(&p, 10001, "location"), NamespaceId(1));
        assert_eq!(resolve_namespace(&p, 10001, "sensors"), NamespaceId(0));
    }
}
