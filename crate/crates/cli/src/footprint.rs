//! Memory footprint of a broker process as the number of virtual instances
//! grows. Each configuration boots a fresh `pinpoint broker run` child so
//! the reading reflects a whole daemon, not a test harness.

use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use pinpoint_core::bench::{footprint_boot_manifest, process_footprint, FootprintReport, FootprintSample};
use pinpoint_core::macguard::DEFAULT_RULES;

/// Line printed by `broker run` once both listeners are bound.
pub const READY_PREFIX: &str = "ready ";

const SETTLE: Duration = Duration::from_millis(300);

struct KillOnDrop(Child);

impl Drop for KillOnDrop {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Writes a self-contained config directory for a broker with
/// `virtual_instances` virtual services and returns the config path.
pub fn write_config(dir: &Path, virtual_instances: u32) -> Result<PathBuf> {
    let files = [
        ("nspolicy", String::new()),
        ("groups.conf", String::new()),
        ("transfer.rules", DEFAULT_RULES.to_string()),
        ("boot.manifest", footprint_boot_manifest(virtual_instances)),
        ("clients.manifest", "sys-token 1000 system\n".to_string()),
        (
            "pinpoint.toml",
            "listen = \"127.0.0.1:0\"\nadmin_http = \"127.0.0.1:0\"\nnspolicy = \"nspolicy\"\n\
             groups = \"groups.conf\"\ntransfer_rules = \"transfer.rules\"\n\
             boot_manifest = \"boot.manifest\"\nclients = \"clients.manifest\"\n"
                .to_string(),
        ),
    ];
    for (name, body) in files {
        std::fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))?;
    }
    Ok(dir.join("pinpoint.toml"))
}

/// Address-space randomization shifts mapping alignment by a page or so
/// from one launch to the next, which is larger than the per-instance
/// delta. Children are started with it disabled so VmSize is repeatable.
#[cfg(target_os = "linux")]
fn fixed_layout(cmd: &mut Command) {
    use std::os::unix::process::CommandExt;
    // SAFETY: personality(2) is async-signal-safe and touches no parent state.
    unsafe {
        cmd.pre_exec(|| {
            let current = libc::personality(0xffff_ffff);
            if current != -1 {
                libc::personality((current | libc::ADDR_NO_RANDOMIZE) as libc::c_ulong);
            }
            Ok(())
        });
    }
}

#[cfg(not(target_os = "linux"))]
fn fixed_layout(_cmd: &mut Command) {}

fn sample_once(exe: &Path, config: &Path) -> Result<(u64, u64)> {
    let mut cmd = Command::new(exe);
    cmd.args(["broker", "run", "--config"])
        .arg(config)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    fixed_layout(&mut cmd);
    let child = cmd
        .spawn()
        .with_context(|| format!("spawning {}", exe.display()))?;
    let mut child = KillOnDrop(child);
    let stdout = child.0.stdout.take().context("child stdout")?;
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    if !line.starts_with(READY_PREFIX) {
        let _ = child.0.wait();
        let mut err = String::new();
        if let Some(mut stderr) = child.0.stderr.take() {
            let _ = stderr.read_to_string(&mut err);
        }
        bail!("broker did not start: {}", err.trim());
    }
    std::thread::sleep(SETTLE);
    let fp = process_footprint(Some(child.0.id()))?;
    Ok((fp.vm_size_bytes, fp.vm_rss_bytes))
}

/// Boots one broker per entry of `instances`, `runs` times each, and keeps
/// the median reading per configuration.
pub fn measure(exe: &Path, instances: &[u32], runs: usize) -> Result<FootprintReport> {
    let mut samples = Vec::with_capacity(instances.len());
    for &n in instances {
        let dir = tempfile::tempdir()?;
        let config = write_config(dir.path(), n)?;
        let mut readings = (0..runs.max(1))
            .map(|_| sample_once(exe, &config))
            .collect::<Result<Vec<_>>>()?;
        readings.sort_unstable();
        let (size, rss) = readings[readings.len() / 2];
        samples.push(FootprintSample { instances: n, footprint_bytes: size, rss_bytes: rss });
    }
    Ok(FootprintReport::from_samples(samples))
}
