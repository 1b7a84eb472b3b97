//! Job processing: index the new issue, check the installation cutoff, run
//! the three analyses and post feedback exactly once.

use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use thiserror::Error;
use tokio::sync::watch;
use tracing::{debug, info, warn};
use triage_core::render::{build_bundle, comment_marker};
use triage_core::store::{IssueFilter, Job, JobStatus, OpLogEntry, OpOutcome};
use triage_core::{FeedbackBundle, IssueRecord, StoreError};

use crate::client::ForgeError;
use crate::service::Service;
use crate::wire::IssuesEvent;

const IDLE_POLL: Duration = Duration::from_millis(250);

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("unusable payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error("analysis task failed: {0}")]
    Task(String),
}

impl PipelineError {
    pub fn is_retriable(&self) -> bool {
        match self {
            PipelineError::Payload(_) => false,
            PipelineError::Store(e) => e.is_retriable(),
            PipelineError::Forge(e) => e.is_retriable(),
            PipelineError::Task(_) => true,
        }
    }
}

/// What happened to one job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JobOutcome {
    Posted(PostReport),
    NotInstalled,
    BeforeInstallation,
}

/// Per-action results of posting a bundle.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PostReport {
    pub succeeded: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
    /// True when at least one failure may succeed on a later attempt.
    pub retriable: bool,
}

pub(crate) async fn worker(service: Arc<Service>, index: usize, mut shutdown: watch::Receiver<bool>) {
    debug!(index, "worker started");
    loop {
        if *shutdown.borrow() {
            break;
        }
        let claimed = {
            let store = service.store().clone();
            tokio::task::spawn_blocking(move || store.claim_job()).await
        };
        match claimed {
            Ok(Ok(Some(job))) => run_job(&service, job).await,
            Ok(Ok(None)) => {
                tokio::select! {
                    _ = service.wait_for_work(IDLE_POLL) => {}
                    _ = shutdown.changed() => {}
                }
            }
            Ok(Err(e)) => {
                warn!(error = %e, "cannot claim job");
                tokio::time::sleep(IDLE_POLL).await;
            }
            Err(e) => warn!(error = %e, "claim task failed"),
        }
    }
    debug!(index, "worker stopped");
}

async fn run_job(service: &Service, job: Job) {
    let store = service.store();
    let result = process_job(service, &job).await;
    let (status, error) = match &result {
        Ok(JobOutcome::Posted(report)) if report.retriable => {
            (retry_or_fail(service, &job), Some(format!("retriable failures: {}", report.failed.join(", "))))
        }
        Ok(_) => (JobStatus::Done, None),
        Err(e) if e.is_retriable() => (retry_or_fail(service, &job), Some(e.to_string())),
        Err(e) => (JobStatus::Failed, Some(e.to_string())),
    };
    if let Some(error) = &error {
        warn!(job = job.id, delivery = %job.delivery_id, ?status, error, "job did not complete");
        let _ = store.log_op(&OpLogEntry::new("pipeline", format!("job {}", job.id), OpOutcome::Failure, error));
    }
    if let Err(e) = store.finish_job(job.id, status, error.as_deref()) {
        warn!(job = job.id, error = %e, "cannot record job status");
    }
    if status == JobStatus::Pending {
        service.wake_workers();
    }
}

fn retry_or_fail(service: &Service, job: &Job) -> JobStatus {
    if job.attempts < service.settings().max_job_attempts {
        JobStatus::Pending
    } else {
        JobStatus::Failed
    }
}

/// Processes one queued `issues`/`opened` delivery.
pub async fn process_job(service: &Service, job: &Job) -> Result<JobOutcome, PipelineError> {
    let event: IssuesEvent =
        serde_json::from_slice(&job.payload).map_err(|e| PipelineError::Payload(e.to_string()))?;
    let payload_repo = event
        .repository
        .to_ref()
        .map_err(|e| PipelineError::Payload(e.to_string()))?;
    let store = service.store();

    let Some(state) = store.sync_state(&payload_repo)? else {
        warn!(repo = %payload_repo, "issue opened in a repository that is not installed");
        store.log_op(
            &OpLogEntry::new("pipeline", "cutoff", OpOutcome::Skipped, "repository not installed")
                .for_issue(&payload_repo, event.issue.number),
        )?;
        return Ok(JobOutcome::NotInstalled);
    };
    let repo = state.repo.clone();
    let issue = event
        .issue
        .to_record(&repo, Utc::now())
        .map_err(|e| PipelineError::Payload(e.to_string()))?;
    if event.issue.is_pull_request() {
        return Err(PipelineError::Payload("pull requests are not triaged".into()));
    }

    let lock = service.issue_lock(&repo, issue.number);
    let _guard = lock.lock().await;

    service.indexer().sync_on_event(&issue)?;
    if issue.created_at < state.installed_at {
        info!(%repo, number = issue.number, "issue predates installation; no feedback");
        store.log_op(
            &OpLogEntry::new("pipeline", "cutoff", OpOutcome::Skipped, "created before installation")
                .for_issue(&repo, issue.number),
        )?;
        return Ok(JobOutcome::BeforeInstallation);
    }

    let candidates = store.query_issues(
        &repo,
        &IssueFilter {
            state: None,
            exclude_number: Some(issue.number),
        },
    )?;
    let files = match service.client().list_files(&repo).await {
        Ok(files) => files,
        Err(e) => {
            // Localization degrades to "no suggestions"; the other two
            // analyses do not depend on the tree.
            store.log_op(
                &OpLogEntry::new("forge", "list_files", OpOutcome::Failure, e.to_string())
                    .for_issue(&repo, issue.number),
            )?;
            Vec::new()
        }
    };

    let host = service.host().clone();
    let deadline = service.settings().deadline;
    let (results, candidates, files) = {
        let issue = issue.clone();
        tokio::task::spawn_blocking(move || {
            let results = host.run_all(&issue, candidates.clone(), files.clone(), deadline);
            (results, candidates, files)
        })
        .await
        .map_err(|e| PipelineError::Task(e.to_string()))?
    };
    for failure in results.failures() {
        warn!(%repo, number = issue.number, %failure, "analysis failed");
        store.log_op(
            &OpLogEntry::new("analyzer", failure.kind.as_str(), OpOutcome::Failure, failure.to_string())
                .for_issue(&repo, issue.number),
        )?;
    }

    let bundle = build_bundle(
        &issue,
        &results,
        &candidates,
        &files,
        service.palette(),
        service.settings().top_k,
    );
    let report = post_feedback(service, &issue, &bundle).await?;
    Ok(JobOutcome::Posted(report))
}

fn label_action(name: &str) -> String {
    format!("label:{name}")
}

fn comment_action(kind: triage_core::CommentKind) -> String {
    format!("comment:{}", kind.as_str())
}

/// Applies labels and posts comments, each action independently. An
/// action already in the store's ledger is skipped; a comment whose marker
/// is already on the forge (a crash between posting and recording) is
/// recorded rather than posted again.
pub async fn post_feedback(
    service: &Service,
    issue: &IssueRecord,
    bundle: &FeedbackBundle,
) -> Result<PostReport, PipelineError> {
    bundle
        .validate()
        .map_err(|e| PipelineError::Payload(format!("invalid feedback bundle: {e}")))?;
    let store = service.store();
    let client = service.client();
    let repo = &issue.repo;
    let number = issue.number;
    let mut report = PostReport::default();
    let log = |action: &str, outcome: OpOutcome, detail: String| {
        store.log_op(&OpLogEntry::new("post", action, outcome, detail).for_issue(repo, number))
    };

    for label in bundle.labels() {
        let action = label_action(&label.name);
        if store.feedback_recorded(repo, number, &action)? {
            report.skipped.push(action);
            continue;
        }
        let applied = async {
            client.ensure_label(repo, label).await?;
            client.add_labels(repo, number, std::slice::from_ref(&label.name)).await
        }
        .await;
        match applied {
            Ok(()) => {
                store.record_feedback(repo, number, &action)?;
                log(&action, OpOutcome::Success, format!("color {}", label.color))?;
                report.succeeded.push(action);
            }
            Err(e) => {
                report.retriable |= e.is_retriable();
                log(&action, OpOutcome::Failure, e.to_string())?;
                report.failed.push(action);
            }
        }
    }

    let mut existing: Option<Vec<String>> = None;
    for comment in &bundle.comments {
        let action = comment_action(comment.kind);
        if store.feedback_recorded(repo, number, &action)? {
            report.skipped.push(action);
            continue;
        }
        if existing.is_none() {
            match client.list_comments(repo, number).await {
                Ok(list) => existing = Some(list.into_iter().map(|c| c.body).collect()),
                Err(e) => {
                    report.retriable |= e.is_retriable();
                    log(&action, OpOutcome::Failure, format!("cannot check existing comments: {e}"))?;
                    report.failed.push(action);
                    continue;
                }
            }
        }
        let marker = comment_marker(comment.kind);
        if existing.as_ref().is_some_and(|bodies| bodies.iter().any(|b| b.contains(&marker))) {
            store.record_feedback(repo, number, &action)?;
            log(&action, OpOutcome::Skipped, "already on the forge".into())?;
            report.skipped.push(action);
            continue;
        }
        match client.post_comment(repo, number, &comment.markdown_body).await {
            Ok(id) => {
                store.record_feedback(repo, number, &action)?;
                log(&action, OpOutcome::Success, format!("comment {id}"))?;
                report.succeeded.push(action);
            }
            Err(e) => {
                report.retriable |= e.is_retriable();
                log(&action, OpOutcome::Failure, e.to_string())?;
                report.failed.push(action);
            }
        }
    }
    if bundle.labels().next().is_none() && bundle.comments.is_empty() {
        log("bundle", OpOutcome::Skipped, "nothing to post".into())?;
    }
    Ok(report)
}
