//! Every virtual instance must be indistinguishable in interface from its
//! family's global instance: same methods, same error codes, same reply
//! shapes. Only values may differ.

mod common;

use common::*;
use pinpoint_core::transport::TransportError;
use pinpoint_core::vservices::{LocationFix, ProviderEvent, SensorChannel, SensorFrame};
use pinpoint_core::{Broker, ClientSession, LocalHandle, NamespaceId, PolicyRule, PolicyUpdate};
use serde_json::{json, Value};

/// Structural type of a JSON value: keys and value kinds, not contents.
fn shape(v: &Value) -> Value {
    match v {
        Value::Null => json!("null"),
        Value::Bool(_) => json!("bool"),
        Value::Number(_) => json!("number"),
        Value::String(_) => json!("string"),
        Value::Array(items) => {
            let mut shapes: Vec<Value> = items.iter().map(shape).collect();
            shapes.sort_by_key(|s| s.to_string());
            shapes.dedup();
            Value::Array(shapes)
        }
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
    }
}

fn outcome(broker: &Broker, session: &ClientSession, handle: LocalHandle, method: &str, payload: &Value) -> (String, Value) {
    match broker.transact(session, handle, method, payload) {
        Ok(v) => ("ok".into(), shape(&v)),
        Err(e) => (e.code().into(), Value::Null),
    }
}

fn full_frame(t: u64) -> SensorFrame {
    let channels = [
        SensorChannel::Acceleration,
        SensorChannel::Magnetic,
        SensorChannel::Orientation,
        SensorChannel::Gyro,
        SensorChannel::Temperature,
        SensorChannel::Distance,
        SensorChannel::Light,
        SensorChannel::Pressure,
        SensorChannel::Humidity,
    ]
    .into_iter()
    .map(|c| (c, vec![1.0; c.arity()]))
    .collect();
    SensorFrame { channels, timestamp: t }
}

fn calls(family: &str) -> Vec<(&'static str, Value)> {
    let mut v = match family {
        "location" => vec![("get_last_location", Value::Null), ("get_update_count", Value::Null)],
        "sensors" => vec![("get_frame", Value::Null), ("get_update_count", Value::Null)],
        "subinfo" => vec![
            ("get_device_id", Value::Null),
            ("get_line1_number", Value::Null),
            ("get_voicemail_number", Value::Null),
            ("get_subscriber_field", json!({ "field": "device_id" })),
            ("get_subscriber_field", json!({ "field": "imsi" })),
            ("get_subscriber_field", json!({})),
        ],
        "phone" => vec![("get_device_id", Value::Null), ("get_line1_number", Value::Null)],
        "ime" => vec![
            ("list_input_methods", Value::Null),
            ("get_focus", Value::Null),
            ("commit_text", json!({ "activity_id": "a/.Main", "text": "hi" })),
            ("commit_text", json!({ "activity_id": "other/.Stale", "text": "hi" })),
            ("select_input_method", json!({ "activity_id": "a/.Main", "ime_id": "latin" })),
            ("select_input_method", json!({ "activity_id": "a/.Main", "ime_id": "nope" })),
            ("commit_text", Value::Null),
        ],
        _ => unreachable!(),
    };
    v.push(("no_such_method", Value::Null));
    v
}

/// Runs the family's calls against every namespace it is registered in,
/// once before any provider data and once after.
fn assert_family_conforms(family: &str) {
    let broker = demo_broker();
    let sys = broker.connect(SYSTEM_TOKEN).unwrap();
    let namespaces: Vec<NamespaceId> = broker
        .hypovisor()
        .registry_snapshot()
        .into_iter()
        .filter(|(n, _)| n == family)
        .map(|(_, ns)| ns)
        .collect();
    assert!(namespaces.len() >= 2, "{family} needs a global and a virtual instance");

    // One client per namespace, routed there by policy.
    let mut handles = Vec::new();
    for (i, ns) in namespaces.iter().enumerate() {
        let token = [APP_A_TOKEN, APP_B_TOKEN, TRUSTED_TOKEN][i];
        let session = broker.connect(token).unwrap();
        let uid = session.identity().uid;
        broker
            .apply_policy(&PolicyUpdate::SetRule(PolicyRule::new(uid, family, ns.0)))
            .unwrap();
        let got = broker.get_service(&session, family).unwrap();
        assert_eq!(got.namespace, *ns);
        handles.push((session, got.handle));
    }

    for phase in 0..2 {
        if phase == 1 {
            let fix = LocationFix { latitude: 10.0, longitude: 20.0, accuracy: 5.0, timestamp: 1 };
            for ev in [
                ProviderEvent::Fix(fix),
                ProviderEvent::Frame(full_frame(1)),
                ProviderEvent::Focus { activity_id: "a/.Main".into() },
            ] {
                broker.inject(&sys, &ev).unwrap();
            }
        }
        for (method, payload) in calls(family) {
            let (s0, h0) = &handles[0];
            let reference = outcome(&broker, s0, *h0, method, &payload);
            for (s, h) in &handles[1..] {
                assert_eq!(
                    outcome(&broker, s, *h, method, &payload),
                    reference,
                    "{family}.{method} phase {phase}"
                );
            }
        }
    }
}

#[test]
fn location_instances_conform() {
    assert_family_conforms("location");
}

#[test]
fn sensor_instances_conform() {
    assert_family_conforms("sensors");
}

#[test]
fn subinfo_instances_conform() {
    assert_family_conforms("subinfo");
}

#[test]
fn phone_instances_conform() {
    assert_family_conforms("phone");
}

#[test]
fn ime_instances_conform() {
    assert_family_conforms("ime");
}

#[test]
fn bad_handle_is_rejected_identically_everywhere() {
    let broker = demo_broker();
    let a = broker.connect(APP_A_TOKEN).unwrap();
    assert_eq!(
        broker.transact(&a, LocalHandle(42), "get_last_location", &Value::Null),
        Err(TransportError::BadHandle(LocalHandle(42)))
    );
}
