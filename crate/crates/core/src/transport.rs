//! The broker: sessions, per-client capability tables and transaction
//! dispatch.
//!
//! A client addresses services only through [`LocalHandle`]s from its own
//! [`CapabilityTable`]. Handle 0 is pre-granted to every session and refers
//! to the registry. Tables grow only through a registry lookup, an allowed
//! transfer, or a client publishing its own node.
//!
//! On the wire every message is a frame `[u32 big-endian length][JSON body]`.
//! Requests carry `{handle, method, payload}` and replies `{status, payload}`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::broadcast;

use crate::config::{BootEntry, LoadedConfig};
use crate::endpoint::{EchoEndpoint, ServiceEndpoint, ServiceError};
use crate::hypovisor::{Hypovisor, HypovisorError, NamespaceId, ServiceKey};
use crate::identity::{ClientIdentity, ClientManifest, SecurityLabel};
use crate::macguard::{self, Decision, Ruleset};
use crate::policy::{GroupTable, PolicyError, PolicySet, PolicyStore, PolicyUpdate};
use crate::vservices::{PluginError, ProviderEvent, ServiceHub};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocalHandle(pub u32);

impl LocalHandle {
    pub const REGISTRY: LocalHandle = LocalHandle(0);
}

impl fmt::Display for LocalHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapabilityTable {
    owner: ClientIdentity,
    entries: BTreeMap<LocalHandle, ServiceKey>,
    next: u32,
}

impl CapabilityTable {
    fn new(owner: ClientIdentity) -> Self {
        let mut entries = BTreeMap::new();
        entries.insert(LocalHandle::REGISTRY, ServiceKey::REGISTRY);
        Self { owner, entries, next: 1 }
    }

    fn insert(&mut self, key: ServiceKey) -> LocalHandle {
        let handle = LocalHandle(self.next);
        self.next += 1;
        self.entries.insert(handle, key);
        handle
    }

    pub fn owner(&self) -> ClientIdentity {
        self.owner
    }

    pub fn get(&self, handle: LocalHandle) -> Option<ServiceKey> {
        self.entries.get(&handle).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (LocalHandle, ServiceKey)> + '_ {
        self.entries.iter().map(|(h, k)| (*h, *k))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

/// A connected client. Only the broker can mint one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSession {
    id: SessionId,
    identity: ClientIdentity,
}

impl ClientSession {
    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn identity(&self) -> ClientIdentity {
        self.identity
    }
}

struct SessionState {
    identity: ClientIdentity,
    table: Mutex<CapabilityTable>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("unknown connect token")]
    AuthRejected,
    #[error("handle {0} is not in the caller's capability table")]
    BadHandle(LocalHandle),
    #[error("service unavailable")]
    ServiceUnavailable,
    #[error("no live session for uid {0}")]
    NoSuchRecipient(u32),
    #[error("transfer denied by policy")]
    TransferDenied,
    #[error("session is closed")]
    SessionClosed,
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Registry(#[from] HypovisorError),
    #[error(transparent)]
    Service(ServiceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Plugin(#[from] PluginError),
}

impl From<ServiceError> for TransportError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Unavailable => TransportError::ServiceUnavailable,
            other => TransportError::Service(other),
        }
    }
}

impl TransportError {
    /// Wire status code.
    pub fn code(&self) -> &'static str {
        match self {
            TransportError::AuthRejected => "auth_rejected",
            TransportError::BadHandle(_) => "bad_handle",
            TransportError::ServiceUnavailable => "service_unavailable",
            TransportError::NoSuchRecipient(_) => "no_such_recipient",
            TransportError::TransferDenied => "transfer_denied",
            TransportError::SessionClosed => "session_closed",
            TransportError::BadRequest(_) => "bad_request",
            TransportError::Registry(e) => match e {
                HypovisorError::PermissionDenied => "permission_denied",
                HypovisorError::AlreadyRegistered { .. } => "already_registered",
                HypovisorError::GlobalMissing(_) => "global_missing",
                HypovisorError::NoSuchService(_) => "no_such_service",
            },
            TransportError::Service(e) => e.code(),
            TransportError::Policy(PolicyError::NoSuchGroup(_)) => "no_such_group",
            TransportError::Policy(_) => "policy_error",
            TransportError::Plugin(_) => "plugin_error",
        }
    }
}

pub const STATUS_OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub handle: LocalHandle,
    pub method: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub status: String,
    #[serde(default)]
    pub payload: Value,
}

impl Reply {
    pub fn ok(payload: Value) -> Self {
        Self { status: STATUS_OK.into(), payload }
    }

    pub fn error(err: &TransportError) -> Self {
        Self {
            status: err.code().into(),
            payload: json!({ "error": err.to_string() }),
        }
    }

    pub fn from_result(result: Result<Value, TransportError>) -> Self {
        match result {
            Ok(v) => Self::ok(v),
            Err(e) => Self::error(&e),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// Prefixes `body` with its length as a big-endian u32.
pub fn encode_frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    out
}

/// Splits one complete frame off the front of `buf`, returning the body and
/// the number of bytes consumed. `Ok(None)` means more bytes are needed.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(&[u8], usize)>, TransportError> {
    if buf.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]) as usize;
    if len > MAX_FRAME_LEN {
        return Err(TransportError::BadRequest(format!("frame of {len} bytes exceeds limit")));
    }
    if buf.len() < 4 + len {
        return Ok(None);
    }
    Ok(Some((&buf[4..4 + len], 4 + len)))
}

/// Notifications for live dashboards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum BrokerEvent {
    PolicyVersion { version: u64 },
    Lookup {
        uid: u32,
        service: String,
        namespace: NamespaceId,
        count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub uid: u32,
    pub label: SecurityLabel,
    pub live_sessions: usize,
    pub lookups: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GetServiceReply {
    pub handle: LocalHandle,
    pub namespace: NamespaceId,
}

#[derive(Deserialize)]
struct GetServiceRequest {
    name: String,
}

#[derive(Deserialize)]
struct AddServiceRequest {
    name: String,
    namespace: NamespaceId,
    plugin: String,
    #[serde(default)]
    params: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct TransferRequest {
    recipient_uid: u32,
    handle: LocalHandle,
}

fn to_json<T: Serialize>(value: &T) -> Result<Value, TransportError> {
    serde_json::to_value(value).map_err(|e| TransportError::BadRequest(e.to_string()))
}

fn payload<T: serde::de::DeserializeOwned>(value: &Value) -> Result<T, TransportError> {
    serde_json::from_value(value.clone()).map_err(|e| TransportError::BadRequest(e.to_string()))
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error("boot entry {name}/{namespace}: {source}")]
    Plugin { name: String, namespace: NamespaceId, source: PluginError },
    #[error("boot entry {name}/{namespace}: {source}")]
    Registry { name: String, namespace: NamespaceId, source: HypovisorError },
    #[error("transfer ruleset has {0} conflict(s)")]
    RuleConflicts(usize),
}

const BOOT_IDENTITY: ClientIdentity = ClientIdentity { uid: 1000, label: SecurityLabel::System };

pub struct BrokerSetup {
    pub clients: ClientManifest,
    pub policy: PolicyStore,
    pub ruleset: Ruleset,
    pub boot: Vec<BootEntry>,
    pub seed: u64,
}

impl BrokerSetup {
    pub fn from_config(cfg: LoadedConfig, seed: u64) -> Self {
        Self {
            clients: cfg.clients,
            policy: PolicyStore::new(cfg.policy, cfg.groups),
            ruleset: cfg.ruleset,
            boot: cfg.boot,
            seed,
        }
    }
}

pub struct Broker {
    clients: ClientManifest,
    hypovisor: Hypovisor,
    hub: ServiceHub,
    ruleset: Ruleset,
    sessions: RwLock<BTreeMap<SessionId, Arc<SessionState>>>,
    next_session: AtomicU64,
    lookups: Mutex<BTreeMap<u32, u64>>,
    events: broadcast::Sender<BrokerEvent>,
    seed: u64,
}

impl Broker {
    /// Validates the transfer ruleset and starts every boot instance.
    /// Global instances are registered before virtual ones.
    pub fn boot(setup: BrokerSetup) -> Result<Self, BootError> {
        let conflicts = macguard::validate_ruleset(&setup.ruleset);
        if !conflicts.is_empty() {
            return Err(BootError::RuleConflicts(conflicts.len()));
        }
        let (events, _) = broadcast::channel(1024);
        let broker = Self {
            clients: setup.clients,
            hypovisor: Hypovisor::new(Arc::new(setup.policy)),
            hub: ServiceHub::new(),
            ruleset: setup.ruleset,
            sessions: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
            lookups: Mutex::new(BTreeMap::new()),
            events,
            seed: setup.seed,
        };
        let mut boot = setup.boot;
        boot.sort_by_key(|e| !e.namespace.is_global());
        for entry in &boot {
            broker.start_instance(&BOOT_IDENTITY, entry)?;
        }
        Ok(broker)
    }

    fn start_instance(&self, caller: &ClientIdentity, entry: &BootEntry) -> Result<ServiceKey, BootError> {
        let endpoint = self.hub.instantiate(entry, self.seed).map_err(|source| BootError::Plugin {
            name: entry.name.clone(),
            namespace: entry.namespace,
            source,
        })?;
        self.hypovisor
            .add_service(caller, &entry.name, entry.namespace, endpoint)
            .map_err(|source| BootError::Registry {
                name: entry.name.clone(),
                namespace: entry.namespace,
                source,
            })
    }

    pub fn hub(&self) -> &ServiceHub {
        &self.hub
    }

    pub fn hypovisor(&self) -> &Hypovisor {
        &self.hypovisor
    }

    pub fn ruleset(&self) -> &Ruleset {
        &self.ruleset
    }

    pub fn policy(&self) -> Arc<PolicySet> {
        self.hypovisor.policy().snapshot()
    }

    pub fn groups(&self) -> &GroupTable {
        self.hypovisor.policy().groups()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<BrokerEvent> {
        self.events.subscribe()
    }

    /// The single sequence point for policy mutations.
    pub fn apply_policy(&self, update: &PolicyUpdate) -> Result<Arc<PolicySet>, PolicyError> {
        let next = self.hypovisor.policy().apply(update)?;
        let _ = self.events.send(BrokerEvent::PolicyVersion { version: next.version() });
        Ok(next)
    }

    pub fn connect(&self, token: &str) -> Result<ClientSession, TransportError> {
        let identity = self.clients.resolve(token).ok_or(TransportError::AuthRejected)?;
        let id = SessionId(self.next_session.fetch_add(1, Ordering::Relaxed));
        self.sessions.write().insert(
            id,
            Arc::new(SessionState {
                identity,
                table: Mutex::new(CapabilityTable::new(identity)),
            }),
        );
        Ok(ClientSession { id, identity })
    }

    pub fn disconnect(&self, session: &ClientSession) {
        self.sessions.write().remove(&session.id);
    }

    fn state(&self, session: &ClientSession) -> Result<Arc<SessionState>, TransportError> {
        self.sessions
            .read()
            .get(&session.id)
            .cloned()
            .ok_or(TransportError::SessionClosed)
    }

    /// Copy of the session's capability table.
    pub fn capabilities(&self, session: &ClientSession) -> Result<CapabilityTable, TransportError> {
        Ok(self.state(session)?.table.lock().clone())
    }

    /// `(name, namespace)` of the service behind `handle`.
    pub fn describe_handle(&self, session: &ClientSession, handle: LocalHandle) -> Result<(String, NamespaceId), TransportError> {
        let key = self.state(session)?.table.lock().get(handle).ok_or(TransportError::BadHandle(handle))?;
        if key == ServiceKey::REGISTRY {
            return Ok(("registry".into(), NamespaceId::GLOBAL));
        }
        let rec = self.hypovisor.record(key).ok_or(TransportError::ServiceUnavailable)?;
        Ok((rec.name.clone(), rec.namespace))
    }

    pub fn get_service(&self, session: &ClientSession, name: &str) -> Result<GetServiceReply, TransportError> {
        let state = self.state(session)?;
        let resolution = self.hypovisor.lookup(state.identity.uid, name)?;
        let handle = state.table.lock().insert(resolution.record.key);
        let count = {
            let mut counts = self.lookups.lock();
            let c = counts.entry(state.identity.uid).or_default();
            *c += 1;
            *c
        };
        let _ = self.events.send(BrokerEvent::Lookup {
            uid: state.identity.uid,
            service: name.to_string(),
            namespace: resolution.record.namespace,
            count,
        });
        Ok(GetServiceReply {
            handle,
            namespace: resolution.record.namespace,
        })
    }

    pub fn add_service(
        &self,
        session: &ClientSession,
        name: &str,
        namespace: NamespaceId,
        endpoint: Arc<dyn ServiceEndpoint>,
    ) -> Result<ServiceKey, TransportError> {
        let state = self.state(session)?;
        Ok(self.hypovisor.add_service(&state.identity, name, namespace, endpoint)?)
    }

    pub fn list_services(&self, session: &ClientSession) -> Result<Vec<(String, NamespaceId)>, TransportError> {
        let state = self.state(session)?;
        Ok(self.hypovisor.list_services(&state.identity)?)
    }

    /// Creates a node owned by the caller and returns the caller's handle to it.
    pub fn publish_node(&self, session: &ClientSession, endpoint: Arc<dyn ServiceEndpoint>) -> Result<LocalHandle, TransportError> {
        let state = self.state(session)?;
        let key = self.hypovisor.add_node(&state.identity, endpoint);
        let handle = state.table.lock().insert(key);
        Ok(handle)
    }

    /// Passes a capability to the oldest live session of `recipient_uid`.
    /// Returns the recipient-side handle value.
    pub fn transfer_handle(
        &self,
        session: &ClientSession,
        recipient_uid: u32,
        handle: LocalHandle,
    ) -> Result<LocalHandle, TransportError> {
        let sender = self.state(session)?;
        if handle == LocalHandle::REGISTRY {
            return Err(TransportError::BadRequest("the registry handle cannot be transferred".into()));
        }
        let key = sender.table.lock().get(handle).ok_or(TransportError::BadHandle(handle))?;
        let recipient = self
            .sessions
            .read()
            .values()
            .find(|s| s.identity.uid == recipient_uid)
            .cloned()
            .ok_or(TransportError::NoSuchRecipient(recipient_uid))?;
        let owner = self.hypovisor.record(key).ok_or(TransportError::ServiceUnavailable)?.owner_label;
        match macguard::check_transfer(sender.identity.label, recipient.identity.label, owner, &self.ruleset) {
            Decision::Deny => Err(TransportError::TransferDenied),
            Decision::Allow => {
                let granted = recipient.table.lock().insert(key);
                Ok(granted)
            }
        }
    }

    /// Delivers a provider event; restricted to system clients.
    pub fn inject(&self, session: &ClientSession, event: &ProviderEvent) -> Result<usize, TransportError> {
        let state = self.state(session)?;
        if state.identity.label != SecurityLabel::System {
            return Err(HypovisorError::PermissionDenied.into());
        }
        Ok(self.hub.deliver(event)?)
    }

    /// Dispatches one transaction. The sender identity comes from the
    /// session, never from the request.
    pub fn transact(&self, session: &ClientSession, handle: LocalHandle, method: &str, payload: &Value) -> Result<Value, TransportError> {
        let state = self.state(session)?;
        let key = state.table.lock().get(handle).ok_or(TransportError::BadHandle(handle))?;
        if key == ServiceKey::REGISTRY {
            return self.registry_call(session, &state, method, payload);
        }
        let record = self.hypovisor.record(key).ok_or(TransportError::ServiceUnavailable)?;
        Ok(record.endpoint.call(&state.identity, method, payload)?)
    }

    pub fn handle_request(&self, session: &ClientSession, request: &Request) -> Reply {
        Reply::from_result(self.transact(session, request.handle, &request.method, &request.payload))
    }

    fn registry_call(&self, session: &ClientSession, state: &SessionState, method: &str, body: &Value) -> Result<Value, TransportError> {
        match method {
            "get_service" => {
                let req: GetServiceRequest = payload(body)?;
                to_json(&self.get_service(session, &req.name)?)
            }
            "list_services" => to_json(&self.list_services(session)?),
            "add_service" => {
                let req: AddServiceRequest = payload(body)?;
                let entry = BootEntry {
                    name: req.name,
                    namespace: req.namespace,
                    plugin: req.plugin,
                    params: req.params,
                };
                if state.identity.label != SecurityLabel::System {
                    return Err(HypovisorError::PermissionDenied.into());
                }
                let endpoint = self.hub.instantiate(&entry, self.seed)?;
                let key = self.hypovisor.add_service(&state.identity, &entry.name, entry.namespace, endpoint)?;
                Ok(json!({ "key": key }))
            }
            "transfer_handle" => {
                let req: TransferRequest = payload(body)?;
                let handle = self.transfer_handle(session, req.recipient_uid, req.handle)?;
                Ok(json!({ "handle": handle }))
            }
            "publish" => {
                let handle = self.publish_node(session, Arc::new(EchoEndpoint))?;
                Ok(json!({ "handle": handle }))
            }
            "inject" => {
                let event: ProviderEvent = payload(body)?;
                let delivered = self.inject(session, &event)?;
                Ok(json!({ "delivered": delivered }))
            }
            "whoami" => to_json(&state.identity),
            other => Err(TransportError::Service(ServiceError::UnknownMethod(other.to_string()))),
        }
    }

    pub fn clients(&self) -> Vec<ClientInfo> {
        let sessions = self.sessions.read();
        let lookups = self.lookups.lock();
        let mut out: BTreeMap<u32, ClientInfo> = BTreeMap::new();
        for identity in self.clients.identities() {
            out.entry(identity.uid).or_insert(ClientInfo {
                uid: identity.uid,
                label: identity.label,
                live_sessions: 0,
                lookups: lookups.get(&identity.uid).copied().unwrap_or(0),
            });
        }
        for s in sessions.values() {
            if let Some(info) = out.get_mut(&s.identity.uid) {
                info.live_sessions += 1;
            }
        }
        out.into_values().collect()
    }

    pub fn client_manifest(&self) -> &ClientManifest {
        &self.clients
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_boot_manifest;
    use crate::vservices::LocationFix;

    fn broker(policy: &str) -> Broker {
        let clients = ClientManifest::parse(
            "sys 1000 system\nlauncher 1001 trusted_app\napp-a 10001 untrusted_app\napp-b 10002 untrusted_app\n",
        )
        .unwrap();
        let boot = parse_boot_manifest(
            "location 1 location semantics=random\nlocation 0 location\nlocation 2 location semantics=fuzzy\n",
        )
        .unwrap();
        Broker::boot(BrokerSetup {
            clients,
            policy: PolicyStore::new(PolicySet::parse(policy).unwrap(), GroupTable::default()),
            ruleset: macguard::default_ruleset(),
            boot,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn connect_grants_registry_handle_only() {
        let b = broker("");
        let s = b.connect("sys").unwrap();
        assert_eq!(s.identity(), ClientIdentity { uid: 1000, label: SecurityLabel::System });
        let table = b.capabilities(&s).unwrap();
        assert_eq!(table.entries().collect::<Vec<_>>(), vec![(LocalHandle(0), ServiceKey::REGISTRY)]);
        let app = b.connect("app-a").unwrap();
        assert_eq!(app.identity().label, SecurityLabel::UntrustedApp);
        assert_eq!(b.capabilities(&app).unwrap().len(), 1);
        assert_eq!(b.connect("who").unwrap_err(), TransportError::AuthRejected);
        // multiple sessions per uid are allowed
        assert_ne!(b.connect("app-a").unwrap().id(), app.id());
    }

    #[test]
    fn get_service_over_registry_handle() {
        let b = broker("10001 location 1");
        let s = b.connect("app-a").unwrap();
        let reply = b.transact(&s, LocalHandle(0), "get_service", &json!({"name": "location"})).unwrap();
        let reply: GetServiceReply = serde_json::from_value(reply).unwrap();
        assert_eq!(reply.handle, LocalHandle(1));
        assert_eq!(reply.namespace, NamespaceId(1));
        assert_eq!(b.describe_handle(&s, reply.handle).unwrap(), ("location".into(), NamespaceId(1)));
    }

    #[test]
    fn unknown_handle_is_rejected_without_side_effects() {
        let b = broker("");
        let s = b.connect("app-a").unwrap();
        let before = b.capabilities(&s).unwrap();
        assert_eq!(
            b.transact(&s, LocalHandle(7), "get_last_location", &Value::Null),
            Err(TransportError::BadHandle(LocalHandle(7)))
        );
        assert_eq!(b.capabilities(&s).unwrap(), before);
    }

    #[test]
    fn location_reply_matches_instance_state() {
        let b = broker("10001 location 2");
        let sys = b.connect("sys").unwrap();
        let app = b.connect("app-a").unwrap();
        let h = b.get_service(&app, "location").unwrap().handle;
        assert_eq!(
            b.transact(&app, h, "get_last_location", &Value::Null).unwrap_err().code(),
            "no_fix_available"
        );
        let fix = LocationFix { latitude: 43.0481, longitude: -76.1474, accuracy: 10.0, timestamp: 5 };
        b.inject(&sys, &ProviderEvent::Fix(fix)).unwrap();
        let got: LocationFix =
            serde_json::from_value(b.transact(&app, h, "get_last_location", &Value::Null).unwrap()).unwrap();
        let inst = b
            .hub()
            .location_instances()
            .into_iter()
            .find(|i| i.namespace() == NamespaceId(2))
            .unwrap();
        assert_eq!(got, inst.get_last_location().unwrap());
        assert_eq!(b.inject(&app, &ProviderEvent::Fix(fix)).unwrap_err().code(), "permission_denied");
    }

    #[test]
    fn transfers_follow_the_guard() {
        let b = broker("");
        let a = b.connect("app-a").unwrap();
        let bb = b.connect("app-b").unwrap();
        let launcher = b.connect("launcher").unwrap();
        let loc = b.get_service(&a, "location").unwrap().handle;
        let before = b.capabilities(&bb).unwrap();
        assert_eq!(b.transfer_handle(&a, 10002, loc), Err(TransportError::TransferDenied));
        assert_eq!(b.capabilities(&bb).unwrap(), before);

        let node = b.publish_node(&a, Arc::new(EchoEndpoint)).unwrap();
        let got = b.transfer_handle(&a, 10002, node).unwrap();
        assert_eq!(b.transact(&bb, got, "ping", &json!(1)).unwrap()["sender_uid"], 10002);

        let lh = b.get_service(&launcher, "location").unwrap().handle;
        assert!(b.transfer_handle(&launcher, 10002, lh).is_ok());
        assert_eq!(b.transfer_handle(&a, 4242, node), Err(TransportError::NoSuchRecipient(4242)));
        assert_eq!(b.transfer_handle(&a, 10002, LocalHandle(99)), Err(TransportError::BadHandle(LocalHandle(99))));
    }

    #[test]
    fn handles_are_per_client() {
        let b = broker("");
        let a = b.connect("app-a").unwrap();
        let c = b.connect("app-b").unwrap();
        b.get_service(&c, "location").unwrap();
        b.get_service(&c, "location").unwrap();
        assert_eq!(b.get_service(&a, "location").unwrap().handle, LocalHandle(1));
        assert_eq!(b.get_service(&c, "location").unwrap().handle, LocalHandle(3));
    }

    #[test]
    fn closed_session_cannot_transact() {
        let b = broker("");
        let a = b.connect("app-a").unwrap();
        b.disconnect(&a);
        assert_eq!(
            b.transact(&a, LocalHandle(0), "whoami", &Value::Null),
            Err(TransportError::SessionClosed)
        );
    }

    #[test]
    fn registry_add_and_list_are_system_only() {
        let b = broker("");
        let sys = b.connect("sys").unwrap();
        let app = b.connect("app-a").unwrap();
        let add = json!({"name": "location", "namespace": 3, "plugin": "location", "params": {"semantics": "random"}});
        assert_eq!(b.transact(&app, LocalHandle(0), "add_service", &add).unwrap_err().code(), "permission_denied");
        b.transact(&sys, LocalHandle(0), "add_service", &add).unwrap();
        assert_eq!(b.transact(&sys, LocalHandle(0), "add_service", &add).unwrap_err().code(), "already_registered");
        let list = b.transact(&sys, LocalHandle(0), "list_services", &Value::Null).unwrap();
        assert_eq!(list.as_array().unwrap().len(), 4);
        assert_eq!(b.transact(&app, LocalHandle(0), "list_services", &Value::Null).unwrap_err().code(), "permission_denied");
        assert_eq!(
            b.transact(&app, LocalHandle(0), "get_service", &json!({"name": "camera"})).unwrap_err().code(),
            "no_such_service"
        );
    }

    #[test]
    fn lookups_emit_events() {
        let b = broker("");
        let mut rx = b.subscribe();
        let a = b.connect("app-a").unwrap();
        b.get_service(&a, "location").unwrap();
        assert_eq!(
            rx.try_recv().unwrap(),
            BrokerEvent::Lookup { uid: 10001, service: "location".into(), namespace: NamespaceId(0), count: 1 }
        );
        b.apply_policy(&PolicyUpdate::ClearUid { uid: 10001 }).unwrap();
        assert_eq!(rx.try_recv().unwrap(), BrokerEvent::PolicyVersion { version: 1 });
        let info = b.clients().into_iter().find(|c| c.uid == 10001).unwrap();
        assert_eq!((info.live_sessions, info.lookups), (1, 1));
    }

    #[test]
    fn frames_are_big_endian_length_prefixed() {
        let frame = encode_frame(b"{}");
        assert_eq!(frame, vec![0, 0, 0, 2, b'{', b'}']);
        assert_eq!(decode_frame(&frame[..3]).unwrap(), None);
        assert_eq!(decode_frame(&frame[..5]).unwrap(), None);
        assert_eq!(decode_frame(&frame).unwrap(), Some((&b"{}"[..], 6)));
        assert!(decode_frame(&[0xff, 0xff, 0xff, 0xff]).is_err());
    }

    #[test]
    fn request_and_reply_json_shape() {
        let req: Request = serde_json::from_str(r#"{"handle":0,"method":"whoami"}"#).unwrap();
        assert_eq!(req.payload, Value::Null);
        let reply = Reply::error(&TransportError::BadHandle(LocalHandle(3)));
        let text = serde_json::to_value(&reply).unwrap();
        assert_eq!(text["status"], "bad_handle");
        assert!(text["payload"]["error"].is_string());
    }
}
