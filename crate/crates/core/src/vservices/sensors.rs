use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::PluginError;
use crate::endpoint::{encode, ServiceEndpoint, ServiceError};
use crate::hypovisor::NamespaceId;
use crate::identity::ClientIdentity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorChannel {
    Acceleration,
    Magnetic,
    Orientation,
    Gyro,
    Temperature,
    Distance,
    Light,
    Pressure,
    Humidity,
}

impl SensorChannel {
    pub const ALL: [SensorChannel; 9] = [
        SensorChannel::Acceleration,
        SensorChannel::Magnetic,
        SensorChannel::Orientation,
        SensorChannel::Gyro,
        SensorChannel::Temperature,
        SensorChannel::Distance,
        SensorChannel::Light,
        SensorChannel::Pressure,
        SensorChannel::Humidity,
    ];

    pub fn arity(self) -> usize {
        match self {
            SensorChannel::Acceleration
            | SensorChannel::Magnetic
            | SensorChannel::Orientation
            | SensorChannel::Gyro => 3,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SensorChannel::Acceleration => "acceleration",
            SensorChannel::Magnetic => "magnetic",
            SensorChannel::Orientation => "orientation",
            SensorChannel::Gyro => "gyro",
            SensorChannel::Temperature => "temperature",
            SensorChannel::Distance => "distance",
            SensorChannel::Light => "light",
            SensorChannel::Pressure => "pressure",
            SensorChannel::Humidity => "humidity",
        }
    }
}

impl fmt::Display for SensorChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorChannel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorChannel::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown sensor channel `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub channels: BTreeMap<SensorChannel, Vec<f64>>,
    pub timestamp: u64,
}

impl SensorFrame {
    pub fn validate(&self) -> Result<(), ServiceError> {
        for channel in SensorChannel::ALL {
            match self.channels.get(&channel) {
                Some(v) if v.len() == channel.arity() => {}
                Some(v) => {
                    return Err(ServiceError::BadPayload(format!(
                        "channel {channel} has {} values, expected {}",
                        v.len(),
                        channel.arity()
                    )))
                }
                None => return Err(ServiceError::BadPayload(format!("missing channel {channel}"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorSemantics {
    Global,
    MotionRandomized,
    LightRandomized,
}

impl SensorSemantics {
    pub fn randomized_channels(self) -> &'static [SensorChannel] {
        match self {
            SensorSemantics::Global => &[],
            SensorSemantics::MotionRandomized => {
                &[SensorChannel::Gyro, SensorChannel::Magnetic, SensorChannel::Orientation]
            }
            SensorSemantics::LightRandomized => &[SensorChannel::Light],
        }
    }
}

/// Uniform draw ranges for randomized channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRanges(BTreeMap<SensorChannel, (f64, f64)>);

impl Default for SensorRanges {
    fn default() -> Self {
        Self(BTreeMap::from([
            (SensorChannel::Gyro, (-10.0, 10.0)),
            (SensorChannel::Magnetic, (-100.0, 100.0)),
            (SensorChannel::Orientation, (0.0, 360.0)),
            (SensorChannel::Light, (0.0, 1000.0)),
            (SensorChannel::Acceleration, (-20.0, 20.0)),
            (SensorChannel::Temperature, (-20.0, 50.0)),
            (SensorChannel::Distance, (0.0, 10.0)),
            (SensorChannel::Pressure, (900.0, 1100.0)),
            (SensorChannel::Humidity, (0.0, 100.0)),
        ]))
    }
}

impl SensorRanges {
    pub fn range(&self, channel: SensorChannel) -> (f64, f64) {
        self.0[&channel]
    }

    pub fn set(&mut self, channel: SensorChannel, lo: f64, hi: f64) {
        self.0.insert(channel, (lo, hi));
    }
}

pub fn transform_sensor_frame<R: Rng + ?Sized>(
    semantics: SensorSemantics,
    frame: &SensorFrame,
    ranges: &SensorRanges,
    rng: &mut R,
) -> SensorFrame {
    let mut out = frame.clone();
    for &channel in semantics.randomized_channels() {
        let (lo, hi) = ranges.range(channel);
        if let Some(values) = out.channels.get_mut(&channel) {
            for v in values.iter_mut() {
                *v = rng.random_range(lo..=hi);
            }
        }
    }
    out
}

struct SensorState {
    rng: ChaCha8Rng,
    last: Option<SensorFrame>,
    updates: u64,
}

pub struct SensorInstance {
    namespace: NamespaceId,
    semantics: SensorSemantics,
    ranges: SensorRanges,
    state: Mutex<SensorState>,
}

impl SensorInstance {
    pub fn new(namespace: NamespaceId, semantics: SensorSemantics, ranges: SensorRanges, seed: u64) -> Self {
        Self {
            namespace,
            semantics,
            ranges,
            state: Mutex::new(SensorState {
                rng: ChaCha8Rng::seed_from_u64(seed),
                last: None,
                updates: 0,
            }),
        }
    }

    /// Params: `semantics=global|motion_randomized|light_randomized` and
    /// optional `<channel>=lo:hi` ranges.
    pub(crate) fn from_params(
        namespace: NamespaceId,
        params: &BTreeMap<String, String>,
        seed: u64,
    ) -> Result<Self, PluginError> {
        let mut semantics = SensorSemantics::Global;
        let mut ranges = SensorRanges::default();
        for (key, value) in params {
            if key == "semantics" {
                semantics = match value.as_str() {
                    "global" => SensorSemantics::Global,
                    "motion_randomized" => SensorSemantics::MotionRandomized,
                    "light_randomized" => SensorSemantics::LightRandomized,
                    other => return Err(PluginError::bad_param("semantics", other)),
                };
                continue;
            }
            let channel: SensorChannel = key.parse().map_err(|_| PluginError::bad_param(key, value))?;
            let (lo, hi) = value
                .split_once(':')
                .and_then(|(a, b)| Some((a.parse::<f64>().ok()?, b.parse::<f64>().ok()?)))
                .filter(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo < hi)
                .ok_or_else(|| PluginError::bad_param(key, value))?;
            ranges.set(channel, lo, hi);
        }
        Ok(Self::new(namespace, semantics, ranges, seed))
    }

    pub fn namespace(&self) -> NamespaceId {
        self.namespace
    }

    pub(crate) fn on_frame(&self, frame: &SensorFrame) {
        let mut state = self.state.lock();
        let SensorState { rng, last, updates } = &mut *state;
        *last = Some(transform_sensor_frame(self.semantics, frame, &self.ranges, rng));
        *updates += 1;
    }

    pub fn get_frame(&self) -> Result<SensorFrame, ServiceError> {
        self.state.lock().last.clone().ok_or(ServiceError::NoFrameAvailable)
    }

    pub fn update_count(&self) -> u64 {
        self.state.lock().updates
    }
}

impl ServiceEndpoint for SensorInstance {
    fn call(&self, _sender: &ClientIdentity, method: &str, _payload: &Value) -> Result<Value, ServiceError> {
        match method {
            "get_frame" => encode(&self.get_frame()?),
            "get_update_count" => Ok(json!({ "count": self.update_count() })),
            other => Err(ServiceError::UnknownMethod(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_frame() -> SensorFrame {
        let channels = SensorChannel::ALL
            .into_iter()
            .map(|c| (c, (0..c.arity()).map(|i| i as f64 + 0.5).collect()))
            .collect();
        SensorFrame { channels, timestamp: 77 }
    }

    #[test]
    fn validate_checks_presence_and_arity() {
        let mut f = sample_frame();
        f.validate().unwrap();
        f.channels.insert(SensorChannel::Gyro, vec![1.0]);
        assert!(f.validate().is_err());
        f.channels.remove(&SensorChannel::Gyro);
        assert!(f.validate().is_err());
    }

    #[test]
    fn randomized_values_stay_in_configured_range() {
        let mut params = BTreeMap::new();
        params.insert("semantics".to_string(), "light_randomized".to_string());
        params.insert("light".to_string(), "5:6".to_string());
        let inst = SensorInstance::from_params(NamespaceId(2), &params, 1).unwrap();
        for _ in 0..100 {
            inst.on_frame(&sample_frame());
            let v = inst.get_frame().unwrap().channels[&SensorChannel::Light][0];
            assert!((5.0..=6.0).contains(&v));
        }
        assert_eq!(inst.update_count(), 100);
    }

    #[test]
    fn bad_range_params_rejected() {
        for (k, v) in [("light", "6:5"), ("light", "x"), ("sonar", "0:1"), ("semantics", "odd")] {
            let params = BTreeMap::from([(k.to_string(), v.to_string())]);
            assert!(SensorInstance::from_params(NamespaceId(1), &params, 0).is_err(), "{k}={v}");
        }
    }

    #[test]
    fn frame_json_uses_channel_names() {
        let text = serde_json::to_string(&sample_frame()).unwrap();
        assert!(text.contains("\"gyro\""));
        let back: SensorFrame = serde_json::from_str(&text).unwrap();
        assert_eq!(back, sample_frame());
    }
}
