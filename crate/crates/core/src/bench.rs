//! Lookup-overhead and memory-footprint measurements.
//!
//! The lookup sweep boots one broker per namespace count, fills its policy
//! with `rules_per_namespace` rules per namespace, and times `get_service`
//! calls issued through the full transaction path from a single probe
//! client. Configurations are measured in interleaved batches so transient
//! host noise spreads evenly across them.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::BootEntry;
use crate::hypovisor::NamespaceId;
use crate::identity::{ClientIdentity, ClientManifest, SecurityLabel};
use crate::macguard;
use crate::policy::{GroupTable, PolicyRule, PolicySet, PolicyStore};
use crate::transport::{Broker, BrokerSetup, ClientSession, LocalHandle};
use crate::vservices::{transform_location, LocationFix, LocationParams, LocationSemantics};

/// Probe client used by the lookup sweep; never appears in the policy.
const PROBE_UID: u32 = 10001;
const PROBE_TOKEN: &str = "bench-probe";
const BATCH: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub namespace_counts: Vec<u32>,
    pub rules_per_namespace: u32,
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            namespace_counts: vec![0, 1, 2, 3],
            rules_per_namespace: 100,
            iterations: 5000,
            warmup: 500,
            seed: 7,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.namespace_counts.is_empty() {
            return Err(BenchError::Aborted("no namespace counts given".into()));
        }
        if self.iterations < 1000 {
            return Err(BenchError::Aborted(format!("iterations must be at least 1000, got {}", self.iterations)));
        }
        if self.iterations <= self.warmup {
            return Err(BenchError::Aborted(format!(
                "iterations ({}) must exceed warmup ({})",
                self.iterations, self.warmup
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("benchmark aborted: {0}")]
    Aborted(String),
    #[error("process footprint unavailable: {0}")]
    FootprintUnavailable(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResult {
    pub namespaces: u32,
    pub policy_rules: usize,
    pub median_lookup_ns: u64,
    pub p99_lookup_ns: u64,
    pub mean_lookup_ns: f64,
    pub footprint_bytes: Option<u64>,
    pub samples_ns: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub results: Vec<ConfigResult>,
    /// Least-squares slope of mean latency against namespace count, as a
    /// percentage of the smallest configuration's mean.
    pub overhead_pct_per_namespace: f64,
    /// Reference value observed on the original handset prototype.
    pub reference_pct_per_namespace: f64,
}

impl BenchReport {
    /// Raw samples as CSV: `namespaces,sample,latency_ns`.
    pub fn write_samples_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "namespaces,sample,latency_ns")?;
        for r in &self.results {
            for (i, ns) in r.samples_ns.iter().enumerate() {
                writeln!(out, "{},{},{}", r.namespaces, i, ns)?;
            }
        }
        Ok(())
    }

    pub fn mean_is_nondecreasing(&self) -> bool {
        let mut sorted: Vec<&ConfigResult> = self.results.iter().collect();
        sorted.sort_by_key(|r| r.namespaces);
        sorted.windows(2).all(|w| w[1].mean_lookup_ns >= w[0].mean_lookup_ns)
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], pct: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Slope normalized to the value at the smallest `x`, in percent.
fn normalized_slope_pct(points: &[(f64, f64)]) -> f64 {
    let Some(base) = points
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|p| p.1)
        .filter(|b| *b > 0.0)
    else {
        return 0.0;
    };
    100.0 * ols_slope(points) / base
}

/// Policy used for a sweep point: `rules_per_namespace` rules for each of
/// namespaces `1..=namespaces`, none of them naming the probe uid.
pub fn sweep_policy(namespaces: u32, rules_per_namespace: u32) -> PolicySet {
    let rules = (1..=namespaces).flat_map(|ns| {
        (0..rules_per_namespace).map(move |i| {
            PolicyRule::new(100_000 + (ns - 1) * rules_per_namespace + i, "location", ns)
        })
    });
    PolicySet::from_rules(rules).expect("sweep rules have distinct keys")
}

fn sweep_broker(namespaces: u32, rules_per_namespace: u32, seed: u64) -> Result<(Broker, ClientSession), BenchError> {
    let mut clients = ClientManifest::default();
    clients.insert(PROBE_TOKEN, ClientIdentity { uid: PROBE_UID, label: SecurityLabel::UntrustedApp });
    let boot = (0..=namespaces)
        .map(|ns| BootEntry {
            name: "location".into(),
            namespace: NamespaceId(ns),
            plugin: "location".into(),
            params: Default::default(),
        })
        .collect();
    let broker = Broker::boot(BrokerSetup {
        clients,
        policy: PolicyStore::new(sweep_policy(namespaces, rules_per_namespace), GroupTable::default()),
        ruleset: macguard::default_ruleset(),
        boot,
        seed,
    })
    .map_err(|e| BenchError::Aborted(e.to_string()))?;
    let session = broker.connect(PROBE_TOKEN).map_err(|e| BenchError::Aborted(e.to_string()))?;
    Ok((broker, session))
}

fn timed_lookup(broker: &Broker, session: &ClientSession, request: &serde_json::Value) -> Result<u64, BenchError> {
    let start = Instant::now();
    let reply = broker.transact(session, LocalHandle::REGISTRY, "get_service", request);
    let elapsed = start.elapsed();
    reply.map_err(|e| BenchError::Aborted(e.to_string()))?;
    Ok(elapsed.as_nanos() as u64)
}

pub fn run_lookup_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let targets = config
        .namespace_counts
        .iter()
        .map(|&n| sweep_broker(n, config.rules_per_namespace, config.seed).map(|(b, s)| (n, b, s)))
        .collect::<Result<Vec<_>, _>>()?;
    let request = json!({ "name": "location" });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for (_, broker, session) in &targets {
        for _ in 0..config.warmup {
            timed_lookup(broker, session, &request)?;
        }
    }

    let measured = config.iterations;
    let mut samples: Vec<Vec<u64>> = vec![Vec::with_capacity(measured); targets.len()];
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut done = 0;
    while done < measured {
        let batch = BATCH.min(measured - done);
        order.shuffle(&mut rng);
        for &idx in &order {
            let (_, broker, session) = &targets[idx];
            for _ in 0..batch {
                samples[idx].push(timed_lookup(broker, session, &request)?);
            }
        }
        done += batch;
    }

    let results: Vec<ConfigResult> = targets
        .iter()
        .zip(samples)
        .map(|((n, broker, _), samples_ns)| {
            let mut sorted = samples_ns.clone();
            sorted.sort_unstable();
            ConfigResult {
                namespaces: *n,
                policy_rules: broker.policy().len(),
                median_lookup_ns: percentile(&sorted, 50.0),
                p99_lookup_ns: percentile(&sorted, 99.0),
                mean_lookup_ns: samples_ns.iter().sum::<u64>() as f64 / samples_ns.len() as f64,
                footprint_bytes: None,
                samples_ns,
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = results.iter().map(|r| (r.namespaces as f64, r.mean_lookup_ns)).collect();
    Ok(BenchReport {
        config: config.clone(),
        overhead_pct_per_namespace: normalized_slope_pct(&points),
        reference_pct_per_namespace: 1.57,
        results,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub vm_size_bytes: u64,
    pub vm_rss_bytes: u64,
}

/// Reads `VmSize` and `VmRSS` for `pid` (or this process) from procfs.
pub fn process_footprint(pid: Option<u32>) -> Result<Footprint, BenchError> {
    let path = match pid {
        Some(p) => format!("/proc/{p}/status"),
        None => "/proc/self/status".to_string(),
    };
    let status = std::fs::read_to_string(&path)
        .map_err(|e| BenchError::FootprintUnavailable(format!("{path}: {e}")))?;
    parse_proc_status(&status).ok_or_else(|| BenchError::FootprintUnavailable(format!("{path}: no VmSize/VmRSS")))
}

fn parse_proc_status(status: &str) -> Option<Footprint> {
    let field = |name: &str| -> Option<u64> {
        let line = status.lines().find(|l| l.starts_with(name))?;
        let kb: u64 = line[name.len()..].split_whitespace().next()?.parse().ok()?;
        Some(kb * 1024)
    };
    Some(Footprint {
        vm_size_bytes: field("VmSize:")?,
        vm_rss_bytes: field("VmRSS:")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintSample {
    pub instances: u32,
    /// `VmSize` of the broker process.
    pub footprint_bytes: u64,
    pub rss_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub samples: Vec<FootprintSample>,
    /// Least-squares growth per virtual instance, as a percentage of the
    /// smallest configuration's footprint.
    pub footprint_pct_per_service: f64,
    pub reference_pct_per_service: f64,
}

impl FootprintReport {
    pub fn from_samples(mut samples: Vec<FootprintSample>) -> Self {
        samples.sort_by_key(|s| s.instances);
        let points: Vec<(f64, f64)> = samples
            .iter()
            .map(|s| (s.instances as f64, s.footprint_bytes as f64))
            .collect();
        Self {
            footprint_pct_per_service: normalized_slope_pct(&points),
            reference_pct_per_service: 0.64,
            samples,
        }
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.samples.windows(2).all(|w| w[1].footprint_bytes >= w[0].footprint_bytes)
    }
}

const VIRTUAL_TEMPLATES: [&str; 6] = [
    "location {ns} location semantics=random",
    "sensors {ns} sensors semantics=motion_randomized",
    "location {ns} location semantics=fuzzy fuzz_radius_m=250",
    "sensors {ns} sensors semantics=light_randomized",
    "ime {ns} ime semantics=restricted installed=latin:LatinIME:builtin",
    "subinfo {ns} subinfo device_id=353918051234561 line1_number=+15550000000 voicemail_number=+15550000001",
];

/// Boot manifest with every global instance plus `virtual_instances`
/// virtual ones spread across the families. Each family's virtual instances
/// take namespaces 1, 2, ... in order.
pub fn footprint_boot_manifest(virtual_instances: u32) -> String {
    let mut out = String::from(
        "location 0 location\nsensors 0 sensors\nime 0 ime installed=latin:LatinIME:builtin\n\
         subinfo 0 subinfo device_id=490154203237518 line1_number=+13155550100 voicemail_number=+13155550199\n",
    );
    let mut next_ns: std::collections::HashMap<&str, u32> = std::collections::HashMap::new();
    for i in 0..virtual_instances {
        let template = VIRTUAL_TEMPLATES[i as usize % VIRTUAL_TEMPLATES.len()];
        let family = template.split_whitespace().next().unwrap_or_default();
        let ns = next_ns.entry(family).or_insert(1);
        out.push_str(&template.replace("{ns}", &ns.to_string()));
        out.push('\n');
        *ns += 1;
    }
    out
}

/// Times fuzzy location transforms over `fixes` inputs for each namespace
/// count, with a broker of that size resident. The inputs are split into
/// chunks; every chunk is timed once per configuration per round, in a
/// freshly shuffled order, so slow drift on the host lands on all
/// configurations alike. A configuration's time is the sum of its fastest
/// run of each chunk over `repeats` rounds.
pub fn run_transform_bench(config: &BenchConfig, fixes: usize, repeats: usize) -> Result<Vec<(u32, Duration)>, BenchError> {
    const CHUNK: usize = 20_000;
    let brokers = config
        .namespace_counts
        .iter()
        .map(|&n| sweep_broker(n, config.rules_per_namespace, config.seed).map(|(b, _)| (n, b)))
        .collect::<Result<Vec<_>, _>>()?;
    let inputs: Vec<LocationFix> = (0..fixes)
        .map(|i| LocationFix {
            latitude: -60.0 + (i % 1200) as f64 * 0.1,
            longitude: -170.0 + (i % 3400) as f64 * 0.1,
            accuracy: 10.0,
            timestamp: i as u64,
        })
        .collect();
    let params = LocationParams::default();
    let chunks: Vec<&[LocationFix]> = inputs.chunks(CHUNK).collect();
    let mut best = vec![vec![Duration::MAX; chunks.len()]; brokers.len()];
    let mut order: Vec<usize> = (0..brokers.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    for _ in 0..repeats.max(1) {
        for (c, chunk) in chunks.iter().enumerate() {
            order.shuffle(&mut shuffle_rng);
            for &idx in &order {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(c as u64));
                let mut acc = 0.0;
                let start = Instant::now();
                for fix in chunk.iter() {
                    acc += transform_location(LocationSemantics::Fuzzy, fix, &params, &mut rng).latitude;
                }
                let elapsed = start.elapsed();
                std::hint::black_box(acc);
                best[idx][c] = best[idx][c].min(elapsed);
            }
        }
    }
    Ok(brokers
        .iter()
        .map(|(n, _)| *n)
        .zip(best.into_iter().map(|per_chunk| per_chunk.into_iter().sum()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_boot_manifest;

    #[test]
    fn config_validation() {
        assert!(BenchConfig::default().validate().is_ok());
        let bad = BenchConfig { iterations: 1000, warmup: 1000, ..Default::default() };
        assert!(matches!(run_lookup_bench(&bad), Err(BenchError::Aborted(_))));
        let short = BenchConfig { iterations: 10, warmup: 1, ..Default::default() };
        assert!(short.validate().is_err());
    }

    #[test]
    fn percentile_and_slope() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        let pts = [(0.0, 100.0), (1.0, 102.0), (2.0, 104.0)];
        assert!((ols_slope(&pts) - 2.0).abs() < 1e-12);
        assert!((normalized_slope_pct(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_policy_sizes() {
        assert!(sweep_policy(0, 100).is_empty());
        let p = sweep_policy(3, 100);
        assert_eq!(p.len(), 300);
        assert_eq!(p.lookup_rule(PROBE_UID, "location"), NamespaceId(0));
        assert_eq!(p.lookup_rule(100_250, "location"), NamespaceId(3));
    }

    #[test]
    fn small_sweep_produces_report() {
        let cfg = BenchConfig {
            namespace_counts: vec![0, 2],
            rules_per_namespace: 10,
            iterations: 1000,
            warmup: 100,
            seed: 1,
        };
        let report = run_lookup_bench(&cfg).unwrap();
        assert_eq!(report.results.len(), 2);
        assert_eq!(report.results[0].samples_ns.len(), 1000);
        assert_eq!(report.results[1].policy_rules, 20);
        let mut csv = Vec::new();
        report.write_samples_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2001);
    }

    #[test]
    fn proc_status_parse() {
        let text = "Name:\tx\nVmSize:\t  1000 kB\nVmRSS:\t 20 kB\n";
        assert_eq!(
            parse_proc_status(text),
            Some(Footprint { vm_size_bytes: 1_024_000, vm_rss_bytes: 20_480 })
        );
        assert_eq!(parse_proc_status("Name: x"), None);
        assert!(matches!(
            process_footprint(Some(u32::MAX)),
            Err(BenchError::FootprintUnavailable(_))
        ));
    }

    #[test]
    fn footprint_manifest_boots() {
        for n in [0, 3, 6, 13] {
            let entries = parse_boot_manifest(&footprint_boot_manifest(n)).unwrap();
            assert_eq!(entries.len(), 4 + n as usize);
            let broker = Broker::boot(BrokerSetup {
                clients: ClientManifest::default(),
                policy: PolicyStore::new(PolicySet::default(), GroupTable::default()),
                ruleset: macguard::default_ruleset(),
                boot: entries,
                seed: 0,
            })
            .unwrap();
            assert_eq!(broker.hypovisor().registry_snapshot().len(), 4 + n as usize);
        }
    }

    #[test]
    fn footprint_report_slope() {
        let r = FootprintReport::from_samples(vec![
            FootprintSample { instances: 6, footprint_bytes: 1200, rss_bytes: 0 },
            FootprintSample { instances: 0, footprint_bytes: 1000, rss_bytes: 0 },
            FootprintSample { instances: 3, footprint_bytes: 1100, rss_bytes: 0 },
        ]);
        assert!(r.is_nondecreasing());
        assert!((r.footprint_pct_per_service - 100.0 * (100.0 / 3.0) / 1000.0).abs() < 1e-9);
    }
}
