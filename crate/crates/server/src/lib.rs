//! Async front end for the broker: a framed transport listener for clients
//! and a JSON admin API for operators and the console.

mod admin;
mod listener;

use std::net::SocketAddr;
use std::sync::Arc;

use pinpoint_core::config::{ConfigError, DaemonConfig};
use pinpoint_core::policy::PolicyStore;
use pinpoint_core::transport::{BootError, Broker, BrokerSetup};
use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;
use tracing::info;

pub use admin::admin_router;
pub use listener::{frame_codec, ListenAddr};

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid listen address `{0}`")]
    BadAddress(String),
}

/// Loads every file named by `config` and boots a broker whose policy is
/// written back to the `nspolicy` file after each update.
pub fn boot_broker(config: &DaemonConfig) -> Result<Arc<Broker>, ServerError> {
    let loaded = config.load_files()?;
    let setup = BrokerSetup {
        clients: loaded.clients,
        policy: PolicyStore::new(loaded.policy, loaded.groups).with_persistence(&config.nspolicy),
        ruleset: loaded.ruleset,
        boot: loaded.boot,
        seed: config.seed,
    };
    Ok(Arc::new(Broker::boot(setup)?))
}

#[derive(Debug, Clone)]
pub struct DaemonOptions {
    pub listen: String,
    pub admin_http: String,
    pub admin_token: Option<String>,
}

impl From<&DaemonConfig> for DaemonOptions {
    fn from(cfg: &DaemonConfig) -> Self {
        Self {
            listen: cfg.listen.clone(),
            admin_http: cfg.admin_http.clone(),
            admin_token: cfg.admin_token.clone(),
        }
    }
}

pub struct RunningDaemon {
    pub broker: Arc<Broker>,
    pub transport_addr: ListenAddr,
    pub admin_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningDaemon {
    pub fn admin_url(&self) -> String {
        format!("http://{}", self.admin_addr)
    }

    /// Stops accepting connections and waits for the listeners to exit.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
        if let ListenAddr::Unix(path) = &self.transport_addr {
            let _ = std::fs::remove_file(path);
        }
    }

    /// Runs until the listeners exit.
    pub async fn wait(self) {
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

/// Binds both listeners and starts serving.
pub async fn start(broker: Arc<Broker>, options: DaemonOptions) -> Result<RunningDaemon, ServerError> {
    let (shutdown, rx) = watch::channel(false);

    let (transport_addr, transport_task) = listener::serve(broker.clone(), &options.listen, rx.clone()).await?;

    let admin = tokio::net::TcpListener::bind(&options.admin_http)
        .await
        .map_err(|source| ServerError::Bind { addr: options.admin_http.clone(), source })?;
    let admin_addr = admin
        .local_addr()
        .map_err(|source| ServerError::Bind { addr: options.admin_http.clone(), source })?;
    let router = admin_router(broker.clone(), options.admin_token.clone(), rx.clone());
    let mut admin_rx = rx;
    let admin_task = tokio::spawn(async move {
        let _ = axum::serve(admin, router)
            .with_graceful_shutdown(async move {
                let _ = admin_rx.wait_for(|stop| *stop).await;
            })
            .await;
    });
    info!(transport = %transport_addr, admin = %admin_addr, "broker serving");

    Ok(RunningDaemon {
        broker,
        transport_addr,
        admin_addr,
        shutdown,
        tasks: vec![transport_task, admin_task],
    })
}
