use std::collections::BTreeMap;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{param_f64, PluginError};
use crate::endpoint::{encode, ServiceEndpoint, ServiceError};
use crate::hypovisor::NamespaceId;
use crate::identity::ClientIdentity;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub const DEFAULT_FUZZ_RADIUS_M: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationFix {
    pub latitude: f64,
    pub longitude: f64,
    pub accuracy: f64,
    pub timestamp: u64,
}

impl LocationFix {
    pub fn validate(&self) -> Result<(), ServiceError> {
        let ok = (-90.0..=90.0).contains(&self.latitude)
            && (-180.0..=180.0).contains(&self.longitude)
            && self.accuracy > 0.0
            && self.accuracy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ServiceError::BadPayload(format!("location fix out of range: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationSemantics {
    Global,
    Random,
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationParams {
    pub fuzz_radius_m: f64,
}

impl Default for LocationParams {
    fn default() -> Self {
        Self { fuzz_radius_m: DEFAULT_FUZZ_RADIUS_M }
    }
}

/// Applies a namespace's location semantics to one provider fix.
///
/// `Random` replaces the coordinates with uniform draws over the full
/// latitude and longitude ranges.
/// `Fuzzy` moves the fix to a point drawn uniformly from the spherical cap of
/// radius `fuzz_radius_m` around it (distance `R * sqrt(u)`, uniform bearing).
pub fn transform_location<R: Rng + ?Sized>(
    semantics: LocationSemantics,
    fix: &LocationFix,
    params: &LocationParams,
    rng: &mut R,
) -> LocationFix {
    match semantics {
        LocationSemantics::Global => *fix,
        LocationSemantics::Random => LocationFix {
            latitude: rng.random_range(-90.0..=90.0),
            longitude: rng.random_range(-180.0..=180.0),
            ..*fix
        },
        LocationSemantics::Fuzzy => {
            let distance = params.fuzz_radius_m * rng.random::<f64>().sqrt();
            let bearing = rng.random_range(0.0..std::f64::consts::TAU);
            let (latitude, longitude) = destination(fix.latitude, fix.longitude, bearing, distance);
            LocationFix { latitude, longitude, ..*fix }
        }
    }
}

/// Great-circle destination from a start point, bearing (radians) and
/// distance (meters).
fn destination(lat_deg: f64, lon_deg: f64, bearing: f64, distance_m: f64) -> (f64, f64) {
    let angular = distance_m / EARTH_RADIUS_M;
    let lat1 = lat_deg.to_radians();
    let lon1 = lon_deg.to_radians();
    let lat2 = (lat1.sin() * angular.cos() + lat1.cos() * angular.sin() * bearing.cos())
        .clamp(-1.0, 1.0)
        .asin();
    let lon2 = lon1
        + (bearing.sin() * angular.sin() * lat1.cos()).atan2(angular.cos() - lat1.sin() * lat2.sin());
    let mut lon = lon2.to_degrees();
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    (lat2.to_degrees().clamp(-90.0, 90.0), lon)
}

struct LocationState {
    rng: ChaCha8Rng,
    last: Option<LocationFix>,
    updates: u64,
}

/// One location service instance. All instances expose the same methods;
/// only the transform applied to incoming fixes differs.
pub struct LocationInstance {
    namespace: NamespaceId,
    semantics: LocationSemantics,
    params: LocationParams,
    state: Mutex<LocationState>,
}

impl LocationInstance {
    pub fn new(namespace: NamespaceId, semantics: LocationSemantics, params: LocationParams, seed: u64) -> Self {
        Self {
            namespace,
            semantics,
            params,
            state: Mutex::new(LocationState {
                rng: ChaCha8Rng::seed_from_u64(seed),
                last: None,
                updates: 0,
            }),
        }
    }

    pub(crate) fn from_params(
        namespace: NamespaceId,
        params: &BTreeMap<String, String>,
        seed: u64,
    ) -> Result<Self, PluginError> {
        let semantics = match params.get("semantics").map(String::as_str) {
            None | Some("global") => LocationSemantics::Global,
            Some("random") => LocationSemantics::Random,
            Some("fuzzy") => LocationSemantics::Fuzzy,
            Some(other) => return Err(PluginError::bad_param("semantics", other)),
        };
        let fuzz_radius_m = param_f64(params, "fuzz_radius_m")?.unwrap_or(DEFAULT_FUZZ_RADIUS_M);
        if !(fuzz_radius_m > 0.0 && fuzz_radius_m.is_finite()) {
            return Err(PluginError::bad_param("fuzz_radius_m", &fuzz_radius_m.to_string()));
        }
        Ok(Self::new(namespace, semantics, LocationParams { fuzz_radius_m }, seed))
    }

    pub fn namespace(&self) -> NamespaceId {
        self.namespace
    }

    pub fn semantics(&self) -> LocationSemantics {
        self.semantics
    }

    pub(crate) fn on_fix(&self, fix: &LocationFix) {
        let mut state = self.state.lock();
        let LocationState { rng, last, updates } = &mut *state;
        *last = Some(transform_location(self.semantics, fix, &self.params, rng));
        *updates += 1;
    }

    pub fn get_last_location(&self) -> Result<LocationFix, ServiceError> {
        self.state.lock().last.ok_or(ServiceError::NoFixAvailable)
    }

    pub fn update_count(&self) -> u64 {
        self.state.lock().updates
    }
}

impl ServiceEndpoint for LocationInstance {
    fn call(&self, _sender: &ClientIdentity, method: &str, _payload: &Value) -> Result<Value, ServiceError> {
        match method {
            "get_last_location" => encode(&self.get_last_location()?),
            "get_update_count" => Ok(json!({ "count": self.update_count() })),
            other => Err(ServiceError::UnknownMethod(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syracuse() -> LocationFix {
        LocationFix { latitude: 43.0481, longitude: -76.1474, accuracy: 12.0, timestamp: 1_000 }
    }

    fn haversine_m(a: &LocationFix, b: &LocationFix) -> f64 {
        let (p1, p2) = (a.latitude.to_radians(), b.latitude.to_radians());
        let dp = p2 - p1;
        let dl = (b.longitude - a.longitude).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * h.sqrt().asin()
    }

    #[test]
    fn global_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = syracuse();
        let out = transform_location(LocationSemantics::Global, &f, &LocationParams::default(), &mut rng);
        assert_eq!(out, f);
    }

    #[test]
    fn fuzzy_stays_within_radius_near_antimeridian_and_pole() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = LocationParams { fuzz_radius_m: 500.0 };
        for start in [
            LocationFix { latitude: 0.0, longitude: 179.9999, accuracy: 5.0, timestamp: 0 },
            LocationFix { latitude: 89.9999, longitude: 10.0, accuracy: 5.0, timestamp: 0 },
        ] {
            for _ in 0..1000 {
                let out = transform_location(LocationSemantics::Fuzzy, &start, &params, &mut rng);
                out.validate().unwrap();
                assert!(haversine_m(&start, &out) <= 500.0 + 1e-6);
                assert_eq!(out.accuracy, start.accuracy);
                assert_eq!(out.timestamp, start.timestamp);
            }
        }
    }

    #[test]
    fn instance_reports_no_fix_then_last_fix() {
        let inst = LocationInstance::new(NamespaceId(0), LocationSemantics::Global, LocationParams::default(), 0);
        assert_eq!(inst.get_last_location(), Err(ServiceError::NoFixAvailable));
        inst.on_fix(&syracuse());
        assert_eq!(inst.get_last_location(), Ok(syracuse()));
        assert_eq!(inst.update_count(), 1);
    }

    #[test]
    fn random_instance_differs_and_stays_in_range() {
        let inst = LocationInstance::new(NamespaceId(1), LocationSemantics::Random, LocationParams::default(), 9);
        inst.on_fix(&syracuse());
        let g = inst.get_last_location().unwrap();
        assert_ne!((g.latitude, g.longitude), (syracuse().latitude, syracuse().longitude));
        g.validate().unwrap();
    }

    #[test]
    fn seeded_transforms_are_reproducible() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| transform_location(LocationSemantics::Fuzzy, &syracuse(), &LocationParams::default(), &mut rng))
                .collect::<Vec<_>>()
        };
        assert_eq!(serde_json::to_string(&run(5)).unwrap(), serde_json::to_string(&run(5)).unwrap());
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = BTreeMap::new();
        p.insert("semantics".to_string(), "blurry".to_string());
        assert!(LocationInstance::from_params(NamespaceId(1), &p, 0).is_err());
        p.insert("semantics".to_string(), "fuzzy".to_string());
        p.insert("fuzz_radius_m".to_string(), "-3".to_string());
        assert!(LocationInstance::from_params(NamespaceId(1), &p, 0).is_err());
    }
}
