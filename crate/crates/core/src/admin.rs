//! JSON schema of the admin HTTP API, shared by the daemon and clients.

use serde::{Deserialize, Serialize};

use crate::hypovisor::NamespaceId;
use crate::policy::PolicyRule;

/// Name the console uses for "no container": assigning to it clears the uid.
pub const GLOBAL_GROUP: &str = "Global";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceView {
    pub name: String,
    pub namespace: NamespaceId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BindingView {
    pub service: String,
    pub namespace: NamespaceId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupView {
    pub name: String,
    pub bindings: Vec<BindingView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyView {
    pub version: u64,
    pub rules: Vec<PolicyRule>,
    /// Canonical `nspolicy` text.
    pub text: String,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignRequest {
    pub uid: u32,
    pub group: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionReply {
    pub version: u64,
}
