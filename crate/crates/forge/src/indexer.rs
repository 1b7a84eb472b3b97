//! Keeps the issue store in step with the forge: a resumable paged backfill
//! on installation, then upserts from webhook events.

use std::sync::Arc;

use chrono::Utc;
use serde::Serialize;
use thiserror::Error;
use tracing::{info, warn};
use triage_core::store::{OpLogEntry, OpOutcome, SyncState};
use triage_core::{IssueRecord, RepoRef, Store, StoreError, UpsertOutcome};

use crate::client::{ForgeClient, ForgeError};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    Indexed(UpsertOutcome),
    NotInstalled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepoStatus {
    #[serde(flatten)]
    pub state: SyncState,
    pub issue_count: u64,
}

#[derive(Clone)]
pub struct Indexer {
    store: Arc<Store>,
    client: ForgeClient,
    page_size: u32,
}

impl Indexer {
    pub fn new(store: Arc<Store>, client: ForgeClient, page_size: u32) -> Self {
        Self {
            store,
            client,
            page_size,
        }
    }

    /// Installs `owner/name`, looking up its default branch first.
    pub async fn install(&self, owner: &str, name: &str) -> Result<SyncState, IndexError> {
        let repo = self.client.get_repo(owner, name).await?;
        self.install_repo(&repo).await
    }

    /// Records the installation time and runs the backfill. Installing an
    /// already installed repository changes nothing, except that an
    /// interrupted backfill resumes from its cursor.
    pub async fn install_repo(&self, repo: &RepoRef) -> Result<SyncState, IndexError> {
        let (state, fresh) = self.store.install_repo(repo, Utc::now())?;
        if fresh {
            info!(%repo, installed_at = %state.installed_at, "installed");
        }
        if state.backfill_complete {
            return Ok(state);
        }
        self.backfill(repo).await
    }

    /// Fetches pages from the persisted cursor until a short page. The
    /// cursor advances only after a whole page is stored, so a crash
    /// re-fetches at most one page and upserts keep that harmless.
    pub async fn backfill(&self, repo: &RepoRef) -> Result<SyncState, IndexError> {
        let state = self
            .store
            .sync_state(repo)?
            .ok_or_else(|| StoreError::NotInstalled(repo.to_string()))?;
        let Some(mut page) = state.backfill_cursor else {
            return Ok(state);
        };
        let repo = &state.repo;
        loop {
            let fetched = match self.client.fetch_issue_page(repo, page, self.page_size).await {
                Ok(p) => p,
                Err(e) => {
                    let _ = self.store.log_op(&OpLogEntry::new(
                        "indexer",
                        format!("backfill page {page}"),
                        OpOutcome::Failure,
                        e.to_string(),
                    ));
                    return Err(e.into());
                }
            };
            for issue in &fetched.issues {
                self.store.upsert_issue(issue)?;
            }
            if fetched.is_last() {
                break;
            }
            page += 1;
            self.store.set_backfill_cursor(repo, page)?;
        }
        self.store.complete_backfill(repo)?;
        let count = self.store.count_issues(repo)?;
        info!(%repo, count, "backfill complete");
        Ok(self
            .store
            .sync_state(repo)?
            .ok_or_else(|| StoreError::NotInstalled(repo.to_string()))?)
    }

    /// Upserts an issue seen in an event so later issues can match it.
    pub fn sync_on_event(&self, issue: &IssueRecord) -> Result<SyncOutcome, StoreError> {
        if self.store.sync_state(&issue.repo)?.is_none() {
            warn!(repo = %issue.repo, number = issue.number, "event for a repository that is not installed");
            return Ok(SyncOutcome::NotInstalled);
        }
        let outcome = self.store.upsert_issue(issue)?;
        self.store.touch_sync(&issue.repo)?;
        Ok(SyncOutcome::Indexed(outcome))
    }

    pub fn status(&self) -> Result<Vec<RepoStatus>, StoreError> {
        self.store
            .sync_states()?
            .into_iter()
            .map(|state| {
                let issue_count = self.store.count_issues(&state.repo)?;
                Ok(RepoStatus { state, issue_count })
            })
            .collect()
    }
}
