use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pinpoint::footprint::{self, READY_PREFIX};
use pinpoint_client::{AdminClient, BrokerClient};
use pinpoint_core::bench::{run_lookup_bench, run_transform_bench, BenchConfig};
use pinpoint_core::config::DaemonConfig;
use pinpoint_core::vservices::{LocationFix, ProviderEvent};
use pinpoint_core::{ClientManifest, NamespaceId, PolicyRule};
use pinpoint_server::{boot_broker, start, DaemonOptions};
use serde_json::{json, Value};
use tracing_subscriber::EnvFilter;

const DEFAULT_CONFIG: &str = "config/pinpoint.toml";

#[derive(Parser)]
#[command(name = "pinpoint", version, about = "Per-client service virtualization broker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the broker daemon.
    Broker {
        #[command(subcommand)]
        action: BrokerCmd,
    },
    /// Inspect and edit the namespace policy through the admin API.
    Policy {
        #[command(flatten)]
        admin: AdminArgs,
        #[command(subcommand)]
        action: PolicyCmd,
    },
    /// List registered services.
    Services {
        #[command(flatten)]
        admin: AdminArgs,
    },
    /// List known clients with live session and lookup counts.
    Clients {
        #[command(flatten)]
        admin: AdminArgs,
    },
    /// Connect as an app and query one service family.
    Demo {
        #[command(flatten)]
        conn: ConnArgs,
        #[command(subcommand)]
        which: DemoCmd,
    },
    /// Feed provider events into the broker.
    Provider {
        #[command(flatten)]
        conn: ConnArgs,
        #[command(subcommand)]
        action: ProviderCmd,
    },
    /// Measurements.
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long, global = true, env = "HYPOBROKER_CONFIG", default_value = DEFAULT_CONFIG)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum BrokerCmd {
    Run {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Override the transport address (`host:port` or `unix:/path`).
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        admin_http: Option<String>,
        #[arg(long, env = "PINPOINT_ADMIN_TOKEN")]
        admin_token: Option<String>,
    },
}

#[derive(Args)]
struct AdminArgs {
    #[arg(long, global = true, env = "PINPOINT_ADMIN", default_value = "http://127.0.0.1:7878")]
    admin: String,
    #[arg(long, global = true, env = "PINPOINT_ADMIN_TOKEN")]
    admin_token: Option<String>,
}

impl AdminArgs {
    fn client(&self) -> AdminClient {
        AdminClient::new(self.admin.clone(), self.admin_token.clone())
    }
}

#[derive(Subcommand)]
enum PolicyCmd {
    Show,
    /// Add or replace the rule for (uid, service).
    Set { uid: u32, service: String, namespace: u32 },
    /// Remove the rule for (uid, service).
    Rm { uid: u32, service: String },
    /// Replace the uid's rules with a group's bindings (`Global` clears them).
    Assign { uid: u32, group: String },
    /// Check the configuration files offline.
    Validate {
        #[command(flatten)]
        cfg: ConfigArg,
    },
}

#[derive(Args)]
struct ConnArgs {
    /// Broker transport address.
    #[arg(long, global = true, env = "PINPOINT_CONNECT", default_value = "127.0.0.1:7700")]
    connect: String,
    /// Client token; looked up by uid in the client manifest when omitted.
    #[arg(long, global = true)]
    token: Option<String>,
    #[arg(long, global = true, default_value_t = 1000)]
    uid: u32,
    #[command(flatten)]
    cfg: ConfigArg,
}

impl ConnArgs {
    fn token(&self) -> Result<String> {
        if let Some(t) = &self.token {
            return Ok(t.clone());
        }
        let cfg = DaemonConfig::load(&self.cfg.config)?;
        let text = std::fs::read_to_string(&cfg.clients).with_context(|| cfg.clients.display().to_string())?;
        let manifest = ClientManifest::parse(&text)?;
        manifest
            .token_for_uid(self.uid)
            .map(str::to_string)
            .with_context(|| format!("no token for uid {} in {}", self.uid, cfg.clients.display()))
    }

    async fn connect(&self) -> Result<BrokerClient> {
        let token = self.token()?;
        Ok(BrokerClient::connect(&self.connect, &token).await?)
    }
}

#[derive(Subcommand)]
enum DemoCmd {
    Location,
    Subinfo,
    Sensors,
    Ime,
}

#[derive(Subcommand)]
enum ProviderCmd {
    /// Inject events from a file of JSON lines.
    Replay { file: PathBuf },
    /// Inject a synthetic walk of location fixes.
    Synth {
        #[arg(long, default_value_t = 37.4275)]
        lat: f64,
        #[arg(long, default_value_t = -122.1697)]
        lon: f64,
        #[arg(long, default_value_t = 10)]
        count: u32,
        #[arg(long, default_value_t = 1000)]
        interval_ms: u64,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Lookup latency against namespace count.
    Lookup {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        namespaces: Vec<u32>,
        #[arg(long, default_value_t = 100)]
        rules_per_ns: u32,
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long, default_value_t = 500)]
        warmup: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// JSON report path; raw samples go to the same path with `.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fuzzy-location transform throughput with brokers of each size resident.
    Transform {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        namespaces: Vec<u32>,
        #[arg(long, default_value_t = 100)]
        rules_per_ns: u32,
        #[arg(long, default_value_t = 1_000_000)]
        fixes: usize,
        #[arg(long, default_value_t = 25)]
        repeats: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Broker process memory against virtual instance count.
    Footprint {
        #[arg(long, value_delimiter = ',', default_value = "0,3,6")]
        instances: Vec<u32>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the cause chain, skipping causes already spelled out by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

async fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Broker { action: BrokerCmd::Run { cfg, listen, admin_http, admin_token } } => {
            run_broker(&cfg.config, listen, admin_http, admin_token).await
        }
        Command::Policy { admin, action } => policy(admin, action).await,
        Command::Services { admin } => print_json(&admin.client().services().await?),
        Command::Clients { admin } => print_json(&admin.client().clients().await?),
        Command::Demo { conn, which } => demo(conn, which).await,
        Command::Provider { conn, action } => provider(conn, action).await,
        Command::Bench { which } => bench(which).await,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn run_broker(
    config: &Path,
    listen: Option<String>,
    admin_http: Option<String>,
    admin_token: Option<String>,
) -> Result<()> {
    let mut cfg = DaemonConfig::load(config)?;
    if let Some(l) = listen {
        cfg.listen = l;
    }
    if let Some(a) = admin_http {
        cfg.admin_http = a;
    }
    if admin_token.is_some() {
        cfg.admin_token = admin_token;
    }
    let broker = boot_broker(&cfg)?;
    let daemon = start(broker, DaemonOptions::from(&cfg)).await?;
    {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{READY_PREFIX}transport={} admin={}", daemon.transport_addr, daemon.admin_url())?;
        out.flush()?;
    }
    tokio::signal::ctrl_c().await?;
    daemon.shutdown().await;
    Ok(())
}

async fn policy(admin: AdminArgs, action: PolicyCmd) -> Result<()> {
    let api = admin.client();
    match action {
        PolicyCmd::Show => {
            let view = api.policy().await?;
            println!("# version {}", view.version);
            print!("{}", view.text);
            for d in &view.diagnostics {
                eprintln!("warning: {d}");
            }
        }
        PolicyCmd::Set { uid, service, namespace } => {
            let v = api.set_rule(&PolicyRule::new(uid, service, namespace)).await?;
            println!("policy version {v}");
        }
        PolicyCmd::Rm { uid, service } => {
            let v = api.remove_rule(uid, &service).await?;
            println!("policy version {v}");
        }
        PolicyCmd::Assign { uid, group } => {
            let v = api.assign(uid, &group).await?;
            println!("policy version {v}");
        }
        PolicyCmd::Validate { cfg } => validate(&cfg.config)?,
    }
    Ok(())
}

fn validate(config: &Path) -> Result<()> {
    let cfg = DaemonConfig::load(config)?;
    let loaded = cfg.load_files()?;
    let registry: Vec<(String, NamespaceId)> =
        loaded.boot.iter().map(|e| (e.name.clone(), e.namespace)).collect();
    let diagnostics = loaded.policy.validate(&registry, &loaded.groups);
    for d in &diagnostics {
        println!("warning: {d}");
    }
    println!(
        "ok: {} rules, {} groups, {} transfer rules, {} boot entries, {} warning(s)",
        loaded.policy.len(),
        loaded.groups.iter().count(),
        loaded.ruleset.len(),
        loaded.boot.len(),
        diagnostics.len()
    );
    Ok(())
}

async fn demo(conn: ConnArgs, which: DemoCmd) -> Result<()> {
    let mut client = conn.connect().await?;
    let (service, method) = match which {
        DemoCmd::Location => ("location", "get_last_location"),
        DemoCmd::Subinfo => ("subinfo", "get_device_id"),
        DemoCmd::Sensors => ("sensors", "get_frame"),
        DemoCmd::Ime => ("ime", "list_input_methods"),
    };
    let got = client.get_service(service).await?;
    let reply = client.transact_raw(got.handle, method, Value::Null).await?;
    println!("{}", serde_json::to_string(&reply)?);
    let hello = client.hello();
    let summary = if reply.is_ok() {
        describe(service, &reply.payload)
    } else {
        format!("error {}", reply.status)
    };
    println!(
        "uid {} ({}) -> {service} namespace {}: {summary}",
        hello.uid, hello.label, got.namespace.0
    );
    Ok(())
}

fn describe(service: &str, payload: &Value) -> String {
    match service {
        "location" => format!(
            "lat {:.5} lon {:.5} (accuracy {} m)",
            payload["latitude"].as_f64().unwrap_or(f64::NAN),
            payload["longitude"].as_f64().unwrap_or(f64::NAN),
            payload["accuracy"]
        ),
        "subinfo" => format!("device id {}", payload["value"].as_str().unwrap_or("?")),
        "sensors" => {
            let channels = payload["channels"].as_object().map(|m| m.len()).unwrap_or(0);
            format!("{channels} channel(s) at t={}", payload["timestamp"])
        }
        "ime" => {
            let names: Vec<&str> = payload
                .as_array()
                .into_iter()
                .flatten()
                .filter_map(|d| d["ime_id"].as_str())
                .collect();
            format!("input methods [{}]", names.join(", "))
        }
        _ => payload.to_string(),
    }
}

async fn provider(conn: ConnArgs, action: ProviderCmd) -> Result<()> {
    let mut client = conn.connect().await?;
    match action {
        ProviderCmd::Replay { file } => {
            let reader = BufReader::new(std::fs::File::open(&file).with_context(|| file.display().to_string())?);
            let mut sent = 0usize;
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() || line.trim_start().starts_with('#') {
                    continue;
                }
                let event: ProviderEvent = serde_json::from_str(&line)
                    .with_context(|| format!("{}:{}", file.display(), idx + 1))?;
                let delivered = client.inject(&event).await?;
                sent += 1;
                println!("{}", json!({ "line": idx + 1, "delivered": delivered }));
            }
            eprintln!("replayed {sent} event(s)");
        }
        ProviderCmd::Synth { lat, lon, count, interval_ms } => {
            let t0 = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
            for i in 0..count {
                let step = i as f64 * 1e-4;
                let fix = LocationFix {
                    latitude: lat + step,
                    longitude: lon + step,
                    accuracy: 8.0,
                    timestamp: t0 + i as u64 * interval_ms,
                };
                let delivered = client.inject(&ProviderEvent::Fix(fix)).await?;
                println!("{}", json!({ "fix": i, "delivered": delivered }));
                if i + 1 < count {
                    tokio::time::sleep(Duration::from_millis(interval_ms)).await;
                }
            }
        }
    }
    Ok(())
}

async fn bench(which: BenchCmd) -> Result<()> {
    match which {
        BenchCmd::Lookup { namespaces, rules_per_ns, iters, warmup, seed, out } => {
            let config = BenchConfig {
                namespace_counts: namespaces,
                rules_per_namespace: rules_per_ns,
                iterations: iters,
                warmup,
                seed,
            };
            config.validate()?;
            let report = tokio::task::spawn_blocking(move || run_lookup_bench(&config)).await??;
            for r in &report.results {
                println!(
                    "namespaces={} rules={} mean={:.0}ns median={}ns p99={}ns",
                    r.namespaces, r.policy_rules, r.mean_lookup_ns, r.median_lookup_ns, r.p99_lookup_ns
                );
            }
            println!(
                "overhead {:.2}% per namespace (reference {:.2}%)",
                report.overhead_pct_per_namespace, report.reference_pct_per_namespace
            );
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
                let csv = path.with_extension("csv");
                report.write_samples_csv(std::io::BufWriter::new(std::fs::File::create(&csv)?))?;
                eprintln!("wrote {} and {}", path.display(), csv.display());
            }
        }
        BenchCmd::Transform { namespaces, rules_per_ns, fixes, repeats, seed } => {
            let config = BenchConfig { namespace_counts: namespaces, rules_per_namespace: rules_per_ns, seed, ..BenchConfig::default() };
            let times = tokio::task::spawn_blocking(move || run_transform_bench(&config, fixes, repeats)).await??;
            for (n, d) in &times {
                println!("namespaces={n} time={:.3}ms", d.as_secs_f64() * 1e3);
            }
            let (lo, hi) = times.iter().fold((f64::MAX, 0.0f64), |(lo, hi), (_, d)| (lo.min(d.as_secs_f64()), hi.max(d.as_secs_f64())));
            println!("spread {:.2}%", (hi - lo) / lo * 100.0);
        }
        BenchCmd::Footprint { instances, runs, out } => {
            if instances.is_empty() {
                bail!("no instance counts given");
            }
            let exe = std::env::current_exe()?;
            let report = tokio::task::spawn_blocking(move || footprint::measure(&exe, &instances, runs)).await??;
            for s in &report.samples {
                println!(
                    "instances={} vm_size={}KiB rss={}KiB",
                    s.instances,
                    s.footprint_bytes / 1024,
                    s.rss_bytes / 1024
                );
            }
            println!(
                "growth {:.3}% per instance (reference {:.2}%)",
                report.footprint_pct_per_service, report.reference_pct_per_service
            );
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            }
        }
    }
    Ok(())
}
