#![allow(dead_code)]

use std::path::PathBuf;

use pinpoint_core::config::DaemonConfig;
use pinpoint_core::{Broker, BrokerSetup};

pub const SYSTEM_TOKEN: &str = "sys-token";
pub const TRUSTED_TOKEN: &str = "trusted-token";
pub const APP_A_TOKEN: &str = "app-a-token";
pub const APP_B_TOKEN: &str = "app-b-token";

pub fn demo_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../config/pinpoint.toml")
}

/// Broker booted from the shipped demo configuration, without persistence.
pub fn demo_broker() -> Broker {
    let cfg = DaemonConfig::load(&demo_config_path()).expect("demo config loads");
    let loaded = cfg.load_files().expect("demo files load");
    Broker::boot(BrokerSetup::from_config(loaded, cfg.seed)).expect("demo broker boots")
}
