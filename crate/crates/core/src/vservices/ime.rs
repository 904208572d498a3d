use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::PluginError;
use crate::endpoint::{decode, encode, ServiceEndpoint, ServiceError};
use crate::hypovisor::NamespaceId;
use crate::identity::ClientIdentity;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImeDescriptor {
    pub ime_id: String,
    pub display_name: String,
    pub builtin: bool,
}

/// Parses `id:DisplayName:builtin|thirdparty` entries separated by commas.
pub fn parse_ime_list(text: &str) -> Result<Vec<ImeDescriptor>, String> {
    let mut out: Vec<ImeDescriptor> = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        let [id, name, kind] = parts[..] else {
            return Err(format!("bad input method entry `{item}`"));
        };
        let builtin = match kind {
            "builtin" => true,
            "thirdparty" => false,
            _ => return Err(format!("bad input method kind `{kind}`")),
        };
        if out.iter().any(|d| d.ime_id == id) {
            return Err(format!("duplicate input method `{id}`"));
        }
        out.push(ImeDescriptor {
            ime_id: id.to_string(),
            display_name: name.to_string(),
            builtin,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImeSemantics {
    Global,
    Restricted,
}

#[derive(Default)]
struct ImeState {
    focus: Option<String>,
    selected: Option<String>,
    commits: u64,
}

/// One input-method manager instance. A restricted instance only offers the
/// builtin subset of the installed methods.
pub struct ImeInstance {
    namespace: NamespaceId,
    semantics: ImeSemantics,
    installed: Vec<ImeDescriptor>,
    state: Mutex<ImeState>,
}

#[derive(Deserialize)]
struct SelectRequest {
    activity_id: String,
    ime_id: String,
}

#[derive(Deserialize)]
struct CommitRequest {
    activity_id: String,
    text: String,
}

impl ImeInstance {
    pub fn new(namespace: NamespaceId, semantics: ImeSemantics, installed: Vec<ImeDescriptor>) -> Self {
        Self {
            namespace,
            semantics,
            installed,
            state: Mutex::new(ImeState::default()),
        }
    }

    pub(crate) fn from_params(namespace: NamespaceId, params: &BTreeMap<String, String>) -> Result<Self, PluginError> {
        let semantics = match params.get("semantics").map(String::as_str) {
            None | Some("global") => ImeSemantics::Global,
            Some("restricted") => ImeSemantics::Restricted,
            Some(other) => return Err(PluginError::bad_param("semantics", other)),
        };
        let installed = match params.get("installed") {
            Some(list) => parse_ime_list(list).map_err(PluginError::InvalidConfig)?,
            None => Vec::new(),
        };
        Ok(Self::new(namespace, semantics, installed))
    }

    pub fn namespace(&self) -> NamespaceId {
        self.namespace
    }

    pub fn list_input_methods(&self) -> Vec<ImeDescriptor> {
        self.installed
            .iter()
            .filter(|d| self.semantics == ImeSemantics::Global || d.builtin)
            .cloned()
            .collect()
    }

    pub(crate) fn set_focus(&self, activity_id: &str) {
        self.state.lock().focus = Some(activity_id.to_string());
    }

    pub fn current_focus(&self) -> Option<String> {
        self.state.lock().focus.clone()
    }

    fn check_focus(state: &ImeState, activity_id: &str) -> Result<(), ServiceError> {
        match &state.focus {
            None => Err(ServiceError::NoFocus),
            Some(current) if current != activity_id => Err(ServiceError::StaleFocus {
                current: current.clone(),
                got: activity_id.to_string(),
            }),
            Some(_) => Ok(()),
        }
    }

    pub fn select_input_method(&self, activity_id: &str, ime_id: &str) -> Result<(), ServiceError> {
        let mut state = self.state.lock();
        Self::check_focus(&state, activity_id)?;
        if !self.list_input_methods().iter().any(|d| d.ime_id == ime_id) {
            return Err(ServiceError::ImeNotAvailable(ime_id.to_string()));
        }
        state.selected = Some(ime_id.to_string());
        Ok(())
    }

    pub fn commit_text(&self, activity_id: &str) -> Result<u64, ServiceError> {
        let mut state = self.state.lock();
        Self::check_focus(&state, activity_id)?;
        state.commits += 1;
        Ok(state.commits)
    }
}

impl ServiceEndpoint for ImeInstance {
    fn call(&self, _sender: &ClientIdentity, method: &str, payload: &Value) -> Result<Value, ServiceError> {
        match method {
            "list_input_methods" => encode(&self.list_input_methods()),
            "get_focus" => Ok(json!({ "activity_id": self.current_focus() })),
            "select_input_method" => {
                let req: SelectRequest = decode(payload)?;
                self.select_input_method(&req.activity_id, &req.ime_id)?;
                Ok(json!({ "activity_id": req.activity_id, "ime_id": req.ime_id }))
            }
            "commit_text" => {
                let req: CommitRequest = decode(payload)?;
                let commits = self.commit_text(&req.activity_id)?;
                Ok(json!({ "activity_id": req.activity_id, "committed": req.text, "commits": commits }))
            }
            other => Err(ServiceError::UnknownMethod(other.to_string())),
        }
    }
}
