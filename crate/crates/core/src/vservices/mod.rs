//! Virtual service plugins and the provider fan-out that feeds them.
//!
//! Every namespace instance of a family exposes the same methods and payload
//! shapes. Providers (location fixes, sensor frames, window focus) deliver
//! to every instance of the family through [`ServiceHub`], since each of
//! them would otherwise only know about the global instance.

pub mod ime;
pub mod location;
pub mod sensors;
pub mod subscriber;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::BootEntry;
use crate::endpoint::{EchoEndpoint, ServiceEndpoint, ServiceError};
use crate::hypovisor::NamespaceId;

pub use ime::{ImeDescriptor, ImeInstance, ImeSemantics};
pub use location::{transform_location, LocationFix, LocationInstance, LocationParams, LocationSemantics};
pub use sensors::{transform_sensor_frame, SensorChannel, SensorFrame, SensorInstance, SensorRanges, SensorSemantics};
pub use subscriber::{luhn_valid, PhoneInstance, SubinfoInstance, SubscriberField, SubscriberRecord, SubscriberStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PluginError {
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("bad value `{value}` for parameter `{key}`")]
    BadParam { key: String, value: String },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0}")]
    InvalidConfig(String),
}

impl PluginError {
    pub(crate) fn bad_param(key: &str, value: &str) -> Self {
        PluginError::BadParam { key: key.to_string(), value: value.to_string() }
    }
}

pub(crate) fn param_f64(params: &BTreeMap<String, String>, key: &str) -> Result<Option<f64>, PluginError> {
    params
        .get(key)
        .map(|v| v.parse::<f64>().map_err(|_| PluginError::bad_param(key, v)))
        .transpose()
}

/// One line of a provider replay file, also the payload of the broker's
/// `inject` method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProviderEvent {
    Fix(LocationFix),
    Frame(SensorFrame),
    Focus { activity_id: String },
}

/// Instances that need provider callbacks, grouped by family.
#[derive(Default)]
pub struct ServiceHub {
    location: RwLock<Vec<Arc<LocationInstance>>>,
    sensors: RwLock<Vec<Arc<SensorInstance>>>,
    ime: RwLock<Vec<Arc<ImeInstance>>>,
    subscribers: Arc<SubscriberStore>,
    location_stream: Mutex<Option<u64>>,
    sensor_stream: Mutex<Option<u64>>,
    focus_stream: Mutex<()>,
}

/// Stable per-instance seed so that transforms are reproducible per boot.
pub fn instance_seed(base: u64, name: &str, namespace: NamespaceId) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes().chain(namespace.0.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    base ^ h
}

impl ServiceHub {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribers(&self) -> &Arc<SubscriberStore> {
        &self.subscribers
    }

    /// Builds the instance described by a boot manifest entry and, for
    /// families with dependent resources, subscribes it to provider fan-out.
    pub fn instantiate(&self, entry: &BootEntry, base_seed: u64) -> Result<Arc<dyn ServiceEndpoint>, PluginError> {
        let seed = instance_seed(base_seed, &entry.name, entry.namespace);
        let ns = entry.namespace;
        Ok(match entry.plugin.as_str() {
            "location" => {
                let inst = Arc::new(LocationInstance::from_params(ns, &entry.params, seed)?);
                self.location.write().push(inst.clone());
                inst
            }
            "sensors" => {
                let inst = Arc::new(SensorInstance::from_params(ns, &entry.params, seed)?);
                self.sensors.write().push(inst.clone());
                inst
            }
            "ime" => {
                let inst = Arc::new(ImeInstance::from_params(ns, &entry.params)?);
                self.ime.write().push(inst.clone());
                inst
            }
            "subinfo" => Arc::new(SubinfoInstance::from_params(ns, &entry.params, self.subscribers.clone())?),
            "phone" => Arc::new(PhoneInstance::new(ns, self.subscribers.clone())),
            "echo" => Arc::new(EchoEndpoint),
            other => return Err(PluginError::UnknownPlugin(other.to_string())),
        })
    }

    pub fn location_instances(&self) -> Vec<Arc<LocationInstance>> {
        self.location.read().clone()
    }

    pub fn sensor_instances(&self) -> Vec<Arc<SensorInstance>> {
        self.sensors.read().clone()
    }

    pub fn ime_instances(&self) -> Vec<Arc<ImeInstance>> {
        self.ime.read().clone()
    }

    /// Delivers a fix to every location instance, in arrival order.
    /// Returns the number of instances updated.
    pub fn on_provider_fix(&self, fix: &LocationFix) -> Result<usize, ServiceError> {
        fix.validate()?;
        let mut last = self.location_stream.lock();
        if matches!(*last, Some(t) if fix.timestamp < t) {
            return Err(ServiceError::BadPayload("fix timestamp went backwards".into()));
        }
        *last = Some(fix.timestamp);
        let instances = self.location.read();
        for inst in instances.iter() {
            inst.on_fix(fix);
        }
        Ok(instances.len())
    }

    pub fn on_sensor_frame(&self, frame: &SensorFrame) -> Result<usize, ServiceError> {
        frame.validate()?;
        let mut last = self.sensor_stream.lock();
        if matches!(*last, Some(t) if frame.timestamp < t) {
            return Err(ServiceError::BadPayload("frame timestamp went backwards".into()));
        }
        *last = Some(frame.timestamp);
        let instances = self.sensors.read();
        for inst in instances.iter() {
            inst.on_frame(frame);
        }
        Ok(instances.len())
    }

    /// Window focus changed: every input-method manager learns about it.
    pub fn push_focus_update(&self, activity_id: &str) -> usize {
        let _order = self.focus_stream.lock();
        let instances = self.ime.read();
        for inst in instances.iter() {
            inst.set_focus(activity_id);
        }
        instances.len()
    }

    pub fn deliver(&self, event: &ProviderEvent) -> Result<usize, ServiceError> {
        match event {
            ProviderEvent::Fix(fix) => self.on_provider_fix(fix),
            ProviderEvent::Frame(frame) => self.on_sensor_frame(frame),
            ProviderEvent::Focus { activity_id } => Ok(self.push_focus_update(activity_id)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(name: &str, ns: u32, plugin: &str, params: &[(&str, &str)]) -> BootEntry {
        BootEntry {
            name: name.into(),
            namespace: NamespaceId(ns),
            plugin: plugin.into(),
            params: params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn fix(t: u64) -> LocationFix {
        LocationFix { latitude: 43.0, longitude: -76.0, accuracy: 10.0, timestamp: t }
    }

    #[test]
    fn fan_out_reaches_every_location_instance_in_order() {
        let hub = ServiceHub::new();
        hub.instantiate(&entry("location", 0, "location", &[]), 1).unwrap();
        hub.instantiate(&entry("location", 1, "location", &[("semantics", "random")]), 1).unwrap();
        hub.instantiate(&entry("location", 2, "location", &[("semantics", "fuzzy")]), 1).unwrap();
        assert_eq!(hub.on_provider_fix(&fix(1)).unwrap(), 3);
        assert_eq!(hub.on_provider_fix(&fix(2)).unwrap(), 3);
        for inst in hub.location_instances() {
            assert_eq!(inst.update_count(), 2);
            assert_eq!(inst.get_last_location().unwrap().timestamp, 2);
        }
        assert!(hub.on_provider_fix(&fix(1)).is_err());
    }

    #[test]
    fn global_only_hub_updates_global() {
        let hub = ServiceHub::new();
        hub.instantiate(&entry("location", 0, "location", &[]), 1).unwrap();
        assert_eq!(hub.on_provider_fix(&fix(1)).unwrap(), 1);
        assert_eq!(hub.location_instances()[0].get_last_location().unwrap(), fix(1));
    }

    #[test]
    fn focus_reaches_every_ime_instance() {
        let hub = ServiceHub::new();
        hub.instantiate(&entry("ime", 0, "ime", &[]), 0).unwrap();
        hub.instantiate(&entry("ime", 1, "ime", &[("semantics", "restricted")]), 0).unwrap();
        assert_eq!(hub.push_focus_update("mail.Compose"), 2);
        for inst in hub.ime_instances() {
            assert_eq!(inst.current_focus().as_deref(), Some("mail.Compose"));
        }
    }

    #[test]
    fn unknown_plugin_fails() {
        let hub = ServiceHub::new();
        assert_eq!(
            hub.instantiate(&entry("camera", 0, "camera", &[]), 0).err(),
            Some(PluginError::UnknownPlugin("camera".into()))
        );
    }

    #[test]
    fn provider_event_json_shape() {
        let ev: ProviderEvent = serde_json::from_str(
            r#"{"type":"fix","latitude":1.0,"longitude":2.0,"accuracy":3.0,"timestamp":4}"#,
        )
        .unwrap();
        assert_eq!(ev, ProviderEvent::Fix(LocationFix { latitude: 1.0, longitude: 2.0, accuracy: 3.0, timestamp: 4 }));
        let focus: ProviderEvent = serde_json::from_str(r#"{"type":"focus","activity_id":"a"}"#).unwrap();
        assert_eq!(focus, ProviderEvent::Focus { activity_id: "a".into() });
    }
}
