//! Wiring of the running service: store, forge client, analyzer host,
//! webhook listener and pipeline workers.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use tracing::{info, warn};
use triage_core::analyzers::{
    DuplicateAnalyzer, DuplicateConfig, LocalizationAnalyzer, LocalizationConfig, SeverityAnalyzer,
    SeverityModel, DUPLICATE_ANALYZER_ID, LOCALIZATION_ANALYZER_ID, SEVERITY_ANALYZER_ID,
};
use triage_core::render::LabelPalette;
use triage_core::{
    AnalyzerDescriptor, AnalyzerKind, ConsensusLocalizer, PluginHost, RepoRef, Store, StoreError,
};

use crate::client::{ForgeClient, ForgeError};
use crate::config::{Config, Secret};
use crate::indexer::Indexer;
use crate::pipeline;
use crate::webhook;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceSettings {
    pub workers: usize,
    pub queue_capacity: usize,
    pub max_job_attempts: u32,
    pub deadline: Duration,
    pub page_size: u32,
    /// Entries shown in the localization comment.
    pub top_k: usize,
}

impl ServiceSettings {
    pub fn from_config(config: &Config) -> Result<Self, ServiceError> {
        let top_k = LocalizationConfig::from_options(&config.analyzers.localization.string_options())
            .map_err(|e| ServiceError::Config(format!("analyzers.localization: {e}")))?
            .top_k;
        Ok(Self {
            workers: config.server.workers,
            queue_capacity: config.server.queue_capacity,
            max_job_attempts: config.server.max_job_attempts,
            deadline: config.analyzers.deadline(),
            page_size: config.forge.page_size,
            top_k,
        })
    }
}

/// Registers the reference analyzers and selects the configured ones.
pub fn build_host(config: &Config) -> Result<PluginHost, ServiceError> {
    let host = PluginHost::new();
    let analyzers = &config.analyzers;
    let bad = |section: &str, e: &dyn std::fmt::Display| ServiceError::Config(format!("analyzers.{section}: {e}"));

    let dup_options = analyzers.duplicate.string_options();
    let dup_cfg = DuplicateConfig::from_options(&dup_options).map_err(|e| bad("duplicate", &e))?;
    let dup = DuplicateAnalyzer::new(dup_cfg, analyzers.pool_size).map_err(|e| bad("duplicate", &e))?;
    host.register(
        AnalyzerDescriptor::new(DUPLICATE_ANALYZER_ID, AnalyzerKind::Duplicate, "TF-IDF duplicate detector")
            .with_config(dup_options),
        Arc::new(dup),
    )
    .map_err(|e| bad("duplicate", &e))?;

    let sev_options = analyzers.severity.string_options();
    let model = match sev_options.get("model") {
        Some(path) => load_severity_model(Path::new(path)).map_err(|e| bad("severity", &e))?,
        None => SeverityModel::seed(),
    };
    host.register(
        AnalyzerDescriptor::new(SEVERITY_ANALYZER_ID, AnalyzerKind::Severity, "Nearest-centroid severity")
            .with_config(sev_options),
        Arc::new(SeverityAnalyzer::new(Arc::new(model))),
    )
    .map_err(|e| bad("severity", &e))?;

    let loc_options = analyzers.localization.string_options();
    let loc_cfg = LocalizationConfig::from_options(&loc_options).map_err(|e| bad("localization", &e))?;
    let runs: usize = match loc_options.get("consensus_runs") {
        Some(v) => v
            .parse()
            .map_err(|_| bad("localization", &format!("consensus_runs `{v}` is not a count")))?,
        None => 1,
    };
    let mut loc_descriptor = AnalyzerDescriptor::new(
        LOCALIZATION_ANALYZER_ID,
        AnalyzerKind::Localization,
        "TF-IDF file localizer",
    )
    .with_config(loc_options);
    let base = Arc::new(LocalizationAnalyzer::new(loc_cfg));
    let localizer: Arc<dyn triage_core::Analyzer> = if runs > 1 {
        loc_descriptor = loc_descriptor.nondeterministic();
        Arc::new(ConsensusLocalizer::new(base, runs).map_err(|e| bad("localization", &e))?)
    } else if runs == 1 {
        base
    } else {
        return Err(bad("localization", &"consensus_runs must be at least 1"));
    };
    host.register(loc_descriptor, localizer).map_err(|e| bad("localization", &e))?;

    for (kind, selection, default_id) in [
        (AnalyzerKind::Duplicate, &analyzers.duplicate, DUPLICATE_ANALYZER_ID),
        (AnalyzerKind::Severity, &analyzers.severity, SEVERITY_ANALYZER_ID),
        (AnalyzerKind::Localization, &analyzers.localization, LOCALIZATION_ANALYZER_ID),
    ] {
        let id = selection.id.as_deref().unwrap_or(default_id);
        if !host.descriptors().iter().any(|d| d.id == id) {
            return Err(ServiceError::Config(format!("unknown {kind} analyzer `{id}`")));
        }
        host.select(kind, id).map_err(|e| ServiceError::Config(e.to_string()))?;
    }
    Ok(host)
}

pub fn load_severity_model(path: &Path) -> Result<SeverityModel, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

type IssueLock = Arc<tokio::sync::Mutex<()>>;

pub struct Service {
    store: Arc<Store>,
    client: ForgeClient,
    host: Arc<PluginHost>,
    palette: LabelPalette,
    settings: ServiceSettings,
    webhook_secret: Secret,
    indexer: Indexer,
    wake: Notify,
    issue_locks: Mutex<HashMap<(String, u64), IssueLock>>,
}

impl Service {
    pub fn new(
        store: Arc<Store>,
        client: ForgeClient,
        host: Arc<PluginHost>,
        palette: LabelPalette,
        settings: ServiceSettings,
        webhook_secret: Secret,
    ) -> Self {
        let indexer = Indexer::new(store.clone(), client.clone(), settings.page_size);
        Self {
            store,
            client,
            host,
            palette,
            settings,
            webhook_secret,
            indexer,
            wake: Notify::new(),
            issue_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_config(config: &Config) -> Result<Self, ServiceError> {
        if config.forge.webhook_secret.is_empty() {
            return Err(ServiceError::Config(
                "forge.webhook_secret is empty (set it or TRIAGE_WEBHOOK_SECRET)".into(),
            ));
        }
        let store = Arc::new(Store::open(&config.store.path)?);
        let client = ForgeClient::from_config(config)?;
        let host = Arc::new(build_host(config)?);
        Ok(Self::new(
            store,
            client,
            host,
            config.palette(),
            ServiceSettings::from_config(config)?,
            config.forge.webhook_secret.clone(),
        ))
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn client(&self) -> &ForgeClient {
        &self.client
    }

    pub fn host(&self) -> &Arc<PluginHost> {
        &self.host
    }

    pub fn palette(&self) -> &LabelPalette {
        &self.palette
    }

    pub fn settings(&self) -> &ServiceSettings {
        &self.settings
    }

    pub fn webhook_secret(&self) -> &Secret {
        &self.webhook_secret
    }

    pub fn indexer(&self) -> &Indexer {
        &self.indexer
    }

    pub fn wake_workers(&self) {
        self.wake.notify_waiters();
        self.wake.notify_one();
    }

    pub(crate) async fn wait_for_work(&self, poll: Duration) {
        let _ = tokio::time::timeout(poll, self.wake.notified()).await;
    }

    pub(crate) fn issue_lock(&self, repo: &RepoRef, number: u64) -> Arc<tokio::sync::Mutex<()>> {
        let mut locks = self.issue_locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry((repo.key(), number)).or_default().clone()
    }

    /// Returns interrupted jobs to the queue, starts the workers and
    /// resumes unfinished backfills.
    pub fn start(self: &Arc<Self>) -> Result<RunningService, ServiceError> {
        let requeued = self.store.requeue_running_jobs()?;
        if requeued > 0 {
            info!(requeued, "returned interrupted jobs to the queue");
        }
        let (shutdown_tx, shutdown_rx) = watch::channel(false);
        let mut tasks: Vec<JoinHandle<()>> = (0..self.settings.workers)
            .map(|i| tokio::spawn(pipeline::worker(self.clone(), i, shutdown_rx.clone())))
            .collect();
        for state in self.store.sync_states()? {
            if !state.backfill_complete {
                let svc = self.clone();
                tasks.push(tokio::spawn(async move {
                    if let Err(e) = svc.indexer.backfill(&state.repo).await {
                        warn!(repo = %state.repo, error = %e, "backfill did not finish");
                    }
                }));
            }
        }
        Ok(RunningService {
            service: self.clone(),
            shutdown: shutdown_tx,
            tasks,
        })
    }

    /// Waits until the queue holds no pending or running jobs.
    pub async fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if matches!(self.store.queue_depth(), Ok(0)) {
                return true;
            }
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

/// Background tasks of a started service.
pub struct RunningService {
    service: Arc<Service>,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningService {
    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    /// Binds the webhook listener and serves until `shutdown` resolves.
    pub async fn serve(
        &self,
        listener: TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<(), ServiceError> {
        let addr: Option<SocketAddr> = listener.local_addr().ok();
        info!(?addr, "listening for webhooks");
        axum::serve(listener, webhook::router(self.service.clone()))
            .with_graceful_shutdown(shutdown)
            .await?;
        Ok(())
    }

    /// Stops workers after their current job.
    pub async fn stop(self) {
        let _ = self.shutdown.send(true);
        self.service.wake_workers();
        for task in self.tasks {
            let _ = task.await;
        }
    }

    /// Aborts every task immediately, as a crash would.
    pub fn abort(self) {
        for task in &self.tasks {
            task.abort();
        }
    }
}
