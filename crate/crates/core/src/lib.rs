//! Core of the pinpoint broker: a capability-based service directory that
//! hands each client the namespace instance of a service its policy assigns.

pub mod admin;
pub mod bench;
pub mod config;
pub mod endpoint;
pub mod hypovisor;
pub mod identity;
pub mod macguard;
pub mod policy;
pub mod transport;
pub mod vservices;

pub use endpoint::{ServiceEndpoint, ServiceError};
pub use hypovisor::{resolve_namespace, Hypovisor, HypovisorError, NamespaceId, ServiceKey};
pub use identity::{ClientIdentity, ClientManifest, SecurityLabel};
pub use policy::{ContainerGroup, GroupTable, PolicyError, PolicyRule, PolicySet, PolicyStore, PolicyUpdate};
pub use transport::{Broker, BrokerEvent, BrokerSetup, ClientSession, LocalHandle, Reply, Request, TransportError};
