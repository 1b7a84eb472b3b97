use std::path::Path;
use std::sync::Arc;

use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;
use triage_core::{RepoRef, Store};
use triage_forge::config::WEBHOOK_SECRET_ENV;
use triage_forge::sim::{FaultRule, Fixture, ForgeSim};
use triage_forge::{Config, ForgeClient, Indexer, Service};

use crate::{CliError, CliResult, SimArgs};

pub fn runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))
}

fn init_logging() {
    let filter = EnvFilter::try_from_env("TRIAGE_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    Config::load(path).map_err(|e| CliError::Runtime(e.to_string()))
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn status(config_path: &Path, json: bool) -> CliResult {
    let config = load_config(config_path)?;
    let store = Arc::new(Store::open(&config.store.path).map_err(runtime_err)?);
    let client = ForgeClient::from_config(&config).map_err(runtime_err)?;
    let indexer = Indexer::new(store.clone(), client, config.forge.page_size);
    let repos = indexer.status().map_err(runtime_err)?;
    let depth = store.queue_depth().map_err(runtime_err)?;
    if json {
        let value = serde_json::json!({ "repositories": repos, "queue_depth": depth });
        println!("{}", serde_json::to_string_pretty(&value).expect("status serializes"));
        return Ok(());
    }
    if repos.is_empty() {
        println!("no repositories installed");
    }
    for r in &repos {
        let backfill = match (r.state.backfill_complete, r.state.backfill_cursor) {
            (true, _) => "complete".to_string(),
            (false, Some(page)) => format!("resumes at page {page}"),
            (false, None) => "pending".to_string(),
        };
        println!(
            "{:<30} issues {:<6} installed {}  backfill {backfill}  last sync {}",
            r.state.repo.to_string(),
            r.issue_count,
            r.state.installed_at.to_rfc3339(),
            r.state.last_sync_at.to_rfc3339(),
        );
    }
    println!("queued jobs: {depth}");
    Ok(())
}

pub async fn install(config_path: &Path, slug: &str) -> CliResult {
    init_logging();
    let repo = RepoRef::parse_slug(slug).map_err(|e| CliError::Usage(e.to_string()))?;
    let config = load_config(config_path)?;
    let store = Arc::new(Store::open(&config.store.path).map_err(runtime_err)?);
    let client = ForgeClient::from_config(&config).map_err(runtime_err)?;
    let indexer = Indexer::new(store.clone(), client, config.forge.page_size);
    let state = indexer.install(&repo.owner, &repo.name).await.map_err(runtime_err)?;
    let count = store.count_issues(&state.repo).map_err(runtime_err)?;
    println!("installed {} at {}; {count} issues indexed", state.repo, state.installed_at.to_rfc3339());
    Ok(())
}

pub async fn serve(config_path: &Path) -> CliResult {
    init_logging();
    let config = load_config(config_path)?;
    let service = Arc::new(Service::from_config(&config).map_err(runtime_err)?);
    let running = service.start().map_err(runtime_err)?;
    let listener = TcpListener::bind(config.server.listen)
        .await
        .map_err(|e| CliError::Runtime(format!("cannot listen on {}: {e}", config.server.listen)))?;
    let served = running
        .serve(listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    running.stop().await;
    served.map_err(runtime_err)
}

pub async fn sim(config_path: &Path, args: &SimArgs) -> CliResult {
    init_logging();
    let fixture = Fixture::load(&args.fixture).map_err(|e| CliError::Data(e.to_string()))?;
    let config = if config_path.exists() { Some(load_config(config_path)?) } else { None };
    let secret = config
        .as_ref()
        .map(|c| c.forge.webhook_secret.expose().to_string())
        .filter(|s| !s.is_empty())
        .or_else(|| std::env::var(WEBHOOK_SECRET_ENV).ok().filter(|s| !s.is_empty()))
        .ok_or_else(|| CliError::Usage(format!("no webhook secret: set {WEBHOOK_SECRET_ENV} or forge.webhook_secret")))?;
    let sim = Arc::new(ForgeSim::seed(&fixture, secret));
    if let Some(url) = &args.webhook_url {
        sim.set_webhook_url(url.clone());
    }
    if let Some(path) = &args.faults {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let rules: Vec<FaultRule> =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for rule in rules {
            sim.push_fault(rule);
        }
    }
    let server = sim.serve(args.listen).await.map_err(runtime_err)?;
    println!(
        "mock forge for {}/{} at {} ({} issues, {} files)",
        fixture.owner,
        fixture.name,
        server.base_url(),
        sim.issue_count(),
        sim.file_count()
    );
    let _ = tokio::signal::ctrl_c().await;
    Ok(())
}
