#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use tempfile::TempDir;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use triage_core::{AnalyzerKind, PluginHost, RepoRef, Store};
use triage_forge::service::ServiceSettings;
use triage_forge::{
    build_host, Config, Fixture, ForgeClient, ForgeSim, RetryPolicy, RunningService, Secret, Service, SimServer,
};

pub const TOKEN: &str = "test-token-0f9e";
pub const SECRET: &str = "hook-secret-7a1c";

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn desk_fixture() -> Fixture {
    Fixture::load(&fixture_path("desk_scale.json")).expect("fixture parses")
}

/// `n` unrelated issues and no files.
pub fn numbered_fixture(n: usize) -> Fixture {
    let mut fx = Fixture::default();
    for i in 1..=n {
        fx.issues.push(triage_forge::sim::FixtureIssue {
            number: None,
            title: format!("Seeded issue {i} about module{i}"),
            body: Some(format!("Reproduction steps for component{i}.")),
            state: "open".into(),
            created_at: None,
            labels: vec![],
            pull_request: false,
        });
    }
    fx
}

pub async fn start_sim(fixture: &Fixture) -> (Arc<ForgeSim>, SimServer) {
    let sim = Arc::new(ForgeSim::seed(fixture, SECRET).require_token(TOKEN));
    let server = sim.serve("127.0.0.1:0".parse().unwrap()).await.expect("sim binds");
    (sim, server)
}

pub fn client_for(server: &SimServer) -> ForgeClient {
    ForgeClient::new(&server.base_url(), "https://forge.test", Secret::new(TOKEN))
        .expect("client builds")
        .with_retry(RetryPolicy::fast())
}

pub fn repo() -> RepoRef {
    RepoRef::new("octo", "widgets", "main").unwrap()
}

pub struct Options {
    pub workers: usize,
    pub page_size: u32,
    pub queue_capacity: usize,
    pub host: Option<PluginHost>,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            workers: 4,
            page_size: 10,
            queue_capacity: 1000,
            host: None,
        }
    }
}

/// A service wired to a running simulator, with its webhook listener
/// registered there.
pub struct Harness {
    pub sim: Arc<ForgeSim>,
    pub sim_server: SimServer,
    pub service: Arc<Service>,
    pub db_path: PathBuf,
    pub dir: TempDir,
    pub webhook_url: String,
    running: Option<RunningService>,
    listener: Option<JoinHandle<()>>,
}

impl Harness {
    pub async fn new(fixture: &Fixture) -> Self {
        Self::with_options(fixture, Options::default()).await
    }

    pub async fn with_options(fixture: &Fixture, options: Options) -> Self {
        let (sim, sim_server) = start_sim(fixture).await;
        let dir = tempfile::tempdir().unwrap();
        let db_path = dir.path().join("triage.db");
        let service = build_service(&sim_server, &db_path, options);
        let mut h = Self {
            sim,
            sim_server,
            service,
            db_path,
            dir,
            webhook_url: String::new(),
            running: None,
            listener: None,
        };
        h.start().await;
        h
    }

    async fn start(&mut self) {
        let running = self.service.start().expect("service starts");
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let router = triage_forge::webhook::router(self.service.clone());
        self.listener = Some(tokio::spawn(async move {
            let _ = axum_serve(listener, router).await;
        }));
        self.webhook_url = format!("http://{addr}/webhook");
        self.sim.set_webhook_url(self.webhook_url.clone());
        self.running = Some(running);
    }

    pub async fn install(&self) {
        self.service
            .indexer()
            .install("octo", "widgets")
            .await
            .expect("install succeeds");
    }

    pub async fn idle(&self) {
        assert!(self.service.wait_idle(Duration::from_secs(20)).await, "queue drained");
    }

    pub async fn stop(mut self) {
        if let Some(r) = self.running.take() {
            r.stop().await;
        }
        if let Some(l) = self.listener.take() {
            l.abort();
        }
    }
}

async fn axum_serve(listener: TcpListener, router: axum::Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

pub fn build_service(server: &SimServer, db_path: &std::path::Path, options: Options) -> Arc<Service> {
    let store = Arc::new(Store::open(db_path).expect("store opens"));
    let host = options.host.unwrap_or_else(|| build_host(&Config::default()).expect("default host"));
    let mut settings = ServiceSettings::from_config(&Config::default()).unwrap();
    settings.workers = options.workers;
    settings.page_size = options.page_size;
    settings.queue_capacity = options.queue_capacity;
    Arc::new(Service::new(
        store,
        client_for(server),
        Arc::new(host),
        Config::default().palette(),
        settings,
        Secret::new(SECRET),
    ))
}

/// The default analyzers with the severity slot replaced.
pub fn host_with_severity(analyzer: Arc<dyn triage_core::Analyzer>, id: &str) -> PluginHost {
    let host = build_host(&Config::default()).unwrap();
    host.register(
        triage_core::AnalyzerDescriptor::new(id, AnalyzerKind::Severity, id),
        analyzer,
    )
    .unwrap();
    host.select(AnalyzerKind::Severity, id).unwrap();
    host
}
