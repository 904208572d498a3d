//! Subscriber identity services.
//!
//! `subinfo` and `phone` are separate registered names, but both read the
//! same per-namespace record. A client isolated on only one of them can still
//! read the real device id through the other.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::PluginError;
use crate::endpoint::{decode, ServiceEndpoint, ServiceError};
use crate::hypovisor::NamespaceId;
use crate::identity::ClientIdentity;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriberRecord {
    pub device_id: String,
    pub line1_number: String,
    pub voicemail_number: String,
}

impl SubscriberRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.device_id.len() != 15 || !luhn_valid(&self.device_id) {
            return Err(format!("device_id `{}` is not a Luhn-valid 15-digit IMEI", self.device_id));
        }
        if self.line1_number.is_empty() || self.voicemail_number.is_empty() {
            return Err("subscriber numbers must be non-empty".into());
        }
        Ok(())
    }

    pub fn field(&self, field: SubscriberField) -> &str {
        match field {
            SubscriberField::DeviceId => &self.device_id,
            SubscriberField::Line1Number => &self.line1_number,
            SubscriberField::VoicemailNumber => &self.voicemail_number,
        }
    }
}

/// Luhn mod-10 check over an all-digit string.
pub fn luhn_valid(digits: &str) -> bool {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return false;
    }
    let sum: u32 = digits
        .bytes()
        .rev()
        .enumerate()
        .map(|(i, b)| {
            let d = u32::from(b - b'0');
            if i % 2 == 1 {
                let dd = d * 2;
                if dd > 9 { dd - 9 } else { dd }
            } else {
                d
            }
        })
        .sum();
    sum % 10 == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubscriberField {
    DeviceId,
    Line1Number,
    VoicemailNumber,
}

impl FromStr for SubscriberField {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "device_id" => Ok(SubscriberField::DeviceId),
            "line1_number" => Ok(SubscriberField::Line1Number),
            "voicemail_number" => Ok(SubscriberField::VoicemailNumber),
            other => Err(ServiceError::NoSuchField(other.to_string())),
        }
    }
}

/// Per-namespace subscriber records shared by `subinfo` and `phone`.
#[derive(Debug, Default)]
pub struct SubscriberStore {
    records: RwLock<HashMap<NamespaceId, Arc<SubscriberRecord>>>,
}

impl SubscriberStore {
    pub fn insert(&self, namespace: NamespaceId, record: SubscriberRecord) {
        self.records.write().insert(namespace, Arc::new(record));
    }

    pub fn get(&self, namespace: NamespaceId) -> Option<Arc<SubscriberRecord>> {
        self.records.read().get(&namespace).cloned()
    }
}

#[derive(Deserialize)]
struct FieldRequest {
    field: String,
}

fn field_reply(record: &SubscriberRecord, field: SubscriberField) -> Value {
    json!({ "value": record.field(field) })
}

/// `subinfo` instance: owns the record for its namespace.
pub struct SubinfoInstance {
    namespace: NamespaceId,
    store: Arc<SubscriberStore>,
}

impl SubinfoInstance {
    pub(crate) fn from_params(
        namespace: NamespaceId,
        params: &BTreeMap<String, String>,
        store: Arc<SubscriberStore>,
    ) -> Result<Self, PluginError> {
        let get = |k: &str| params.get(k).cloned().ok_or_else(|| PluginError::MissingParam(k.to_string()));
        let record = SubscriberRecord {
            device_id: get("device_id")?,
            line1_number: get("line1_number")?,
            voicemail_number: get("voicemail_number")?,
        };
        record.validate().map_err(PluginError::InvalidConfig)?;
        store.insert(namespace, record);
        Ok(Self { namespace, store })
    }

    pub fn get_subscriber_field(&self, field: SubscriberField) -> Result<String, ServiceError> {
        let record = self.store.get(self.namespace).ok_or(ServiceError::Unavailable)?;
        Ok(record.field(field).to_string())
    }
}

impl ServiceEndpoint for SubinfoInstance {
    fn call(&self, _sender: &ClientIdentity, method: &str, payload: &Value) -> Result<Value, ServiceError> {
        let record = self.store.get(self.namespace).ok_or(ServiceError::Unavailable)?;
        let field = match method {
            "get_subscriber_field" => decode::<FieldRequest>(payload)?.field.parse()?,
            "get_device_id" => SubscriberField::DeviceId,
            "get_line1_number" => SubscriberField::Line1Number,
            "get_voicemail_number" => SubscriberField::VoicemailNumber,
            other => return Err(ServiceError::UnknownMethod(other.to_string())),
        };
        Ok(field_reply(&record, field))
    }
}

/// `phone` instance: delegates identity queries to the subscriber record of
/// the same namespace.
pub struct PhoneInstance {
    namespace: NamespaceId,
    store: Arc<SubscriberStore>,
}

impl PhoneInstance {
    pub(crate) fn new(namespace: NamespaceId, store: Arc<SubscriberStore>) -> Self {
        Self { namespace, store }
    }
}

impl ServiceEndpoint for PhoneInstance {
    fn call(&self, _sender: &ClientIdentity, method: &str, _payload: &Value) -> Result<Value, ServiceError> {
        let record = self.store.get(self.namespace).ok_or(ServiceError::Unavailable)?;
        match method {
            "get_device_id" => Ok(field_reply(&record, SubscriberField::DeviceId)),
            "get_line1_number" => Ok(field_reply(&record, SubscriberField::Line1Number)),
            other => Err(ServiceError::UnknownMethod(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luhn_known_values() {
        assert!(luhn_valid("490154203237518"));
        assert!(luhn_valid("353918051234561"));
        assert!(!luhn_valid("490154203237519"));
        assert!(!luhn_valid("49015420323751a"));
        assert!(!luhn_valid(""));
    }

    #[test]
    fn unknown_field_is_rejected() {
        assert_eq!(
            "meid".parse::<SubscriberField>().unwrap_err(),
            ServiceError::NoSuchField("meid".into())
        );
    }

    #[test]
    fn invalid_imei_fails_boot() {
        let store = Arc::new(SubscriberStore::default());
        let params: BTreeMap<String, String> = [
            ("device_id", "490154203237519"),
            ("line1_number", "1"),
            ("voicemail_number", "2"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        assert!(matches!(
            SubinfoInstance::from_params(NamespaceId(0), &params, store),
            Err(PluginError::InvalidConfig(_))
        ));
    }
}
