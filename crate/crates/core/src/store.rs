//! Single-file SQLite store: the issue index, per-repository sync state, the
//! idempotency ledger and durable job queue for webhook deliveries, the
//! feedback ledger, and the operations log.
//!
//! A [`Store`] is a cheap clonable handle. Writes are serialized through one
//! connection and every multi-statement write runs inside a transaction.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, SecondsFormat, Utc};
use rusqlite::{params, Connection, OptionalExtension, Row, TransactionBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{IssueRecord, IssueState, ModelError, RepoRef};

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Invalid(#[from] ModelError),
    /// The database could not be reached or written. Callers may retry.
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("repository {0} is not installed")]
    NotInstalled(String),
    #[error("stored data is corrupt: {0}")]
    Corrupt(String),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    SchemaMismatch { found: i64 },
}

impl StoreError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, StoreError::Unavailable(_))
    }
}

impl From<rusqlite::Error> for StoreError {
    fn from(e: rusqlite::Error) -> Self {
        match e {
            rusqlite::Error::FromSqlConversionFailure(..)
            | rusqlite::Error::InvalidColumnType(..)
            | rusqlite::Error::IntegralValueOutOfRange(..) => StoreError::Corrupt(e.to_string()),
            other => StoreError::Unavailable(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Inserted,
    Updated,
    Unchanged,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IssueFilter {
    pub state: Option<IssueState>,
    pub exclude_number: Option<u64>,
}

/// Installation and backfill progress of one repository.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncState {
    pub repo: RepoRef,
    pub installed_at: DateTime<Utc>,
    /// Next page to fetch; absent once backfill is complete.
    pub backfill_cursor: Option<u32>,
    pub backfill_complete: bool,
    pub last_sync_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted(i64),
    /// The delivery id was already recorded.
    Replayed,
    QueueFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    fn as_str(self) -> &'static str {
        match self {
            JobStatus::Pending => "pending",
            JobStatus::Running => "running",
            JobStatus::Done => "done",
            JobStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pending" => JobStatus::Pending,
            "running" => JobStatus::Running,
            "done" => JobStatus::Done,
            "failed" => JobStatus::Failed,
            other => return Err(StoreError::Corrupt(format!("job status `{other}`"))),
        })
    }
}

/// A persisted webhook delivery awaiting (or undergoing) processing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub id: i64,
    pub delivery_id: String,
    pub event: String,
    pub payload: Vec<u8>,
    pub status: JobStatus,
    pub attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpOutcome {
    Success,
    Failure,
    Skipped,
}

impl OpOutcome {
    fn as_str(self) -> &'static str {
        match self {
            OpOutcome::Success => "success",
            OpOutcome::Failure => "failure",
            OpOutcome::Skipped => "skipped",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "success" => OpOutcome::Success,
            "failure" => OpOutcome::Failure,
            "skipped" => OpOutcome::Skipped,
            other => return Err(StoreError::Corrupt(format!("op outcome `{other}`"))),
        })
    }
}

/// One row of the operations log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpLogEntry {
    pub at: DateTime<Utc>,
    pub repo_key: Option<String>,
    pub number: Option<u64>,
    /// Coarse area, e.g. `analyzer`, `post`, `pipeline`.
    pub category: String,
    pub action: String,
    pub outcome: OpOutcome,
    pub detail: String,
}

impl OpLogEntry {
    pub fn new(
        category: impl Into<String>,
        action: impl Into<String>,
        outcome: OpOutcome,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            at: Utc::now(),
            repo_key: None,
            number: None,
            category: category.into(),
            action: action.into(),
            outcome,
            detail: detail.into(),
        }
    }

    pub fn for_issue(mut self, repo: &RepoRef, number: u64) -> Self {
        self.repo_key = Some(repo.key());
        self.number = Some(number);
        self
    }
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS schema_version (version INTEGER NOT NULL);
CREATE TABLE IF NOT EXISTS issues (
    repo_key TEXT NOT NULL,
    number INTEGER NOT NULL,
    owner TEXT NOT NULL,
    name TEXT NOT NULL,
    default_branch TEXT NOT NULL,
    title TEXT NOT NULL,
    body TEXT NOT NULL,
    state TEXT NOT NULL,
    labels TEXT NOT NULL,
    url TEXT NOT NULL,
    created_at TEXT NOT NULL,
    indexed_at TEXT NOT NULL,
    PRIMARY KEY (repo_key, number)
);
CREATE TABLE IF NOT EXISTS repos (
    repo_key TEXT PRIMARY KEY,
    owner TEXT NOT NULL,
    name TEXT NOT NULL,
    default_branch TEXT NOT NULL,
    installed_at TEXT NOT NULL,
    backfill_cursor INTEGER,
    backfill_complete INTEGER NOT NULL,
    last_sync_at TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS deliveries (
    delivery_id TEXT PRIMARY KEY,
    event TEXT NOT NULL,
    received_at TEXT NOT NULL,
    disposition TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS jobs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    delivery_id TEXT NOT NULL UNIQUE,
    event TEXT NOT NULL,
    payload BLOB NOT NULL,
    status TEXT NOT NULL,
    attempts INTEGER NOT NULL DEFAULT 0,
    enqueued_at TEXT NOT NULL,
    updated_at TEXT NOT NULL,
    last_error TEXT
);
CREATE INDEX IF NOT EXISTS jobs_status ON jobs (status, id);
CREATE TABLE IF NOT EXISTS feedback_actions (
    repo_key TEXT NOT NULL,
    number INTEGER NOT NULL,
    action TEXT NOT NULL,
    done_at TEXT NOT NULL,
    PRIMARY KEY (repo_key, number, action)
);
CREATE TABLE IF NOT EXISTS ops_log (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    at TEXT NOT NULL,
    repo_key TEXT,
    number INTEGER,
    category TEXT NOT NULL,
    action TEXT NOT NULL,
    outcome TEXT NOT NULL,
    detail TEXT NOT NULL
);
";

fn ts(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::Corrupt(format!("timestamp `{s}`: {e}")))
}

#[derive(Clone)]
pub struct Store {
    conn: Arc<Mutex<Connection>>,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

impl Store {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        Self::init(conn, Some(path.to_path_buf()))
    }

    pub fn open_in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?, None)
    }

    fn init(conn: Connection, path: Option<PathBuf>) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        let found: Option<i64> = conn
            .query_row("SELECT version FROM schema_version LIMIT 1", [], |r| r.get(0))
            .optional()?;
        match found {
            None => {
                conn.execute("INSERT INTO schema_version (version) VALUES (?1)", [SCHEMA_VERSION])?;
            }
            Some(SCHEMA_VERSION) => {}
            Some(other) => return Err(StoreError::SchemaMismatch { found: other }),
        }
        Ok(Self {
            conn: Arc::new(Mutex::new(conn)),
            path,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        // A panic while holding the lock cannot leave a half-applied write:
        // every write is a single statement or a transaction.
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn schema_version(&self) -> Result<i64> {
        Ok(self
            .conn()
            .query_row("SELECT version FROM schema_version LIMIT 1", [], |r| r.get(0))?)
    }

    // -- issues ---------------------------------------------------------

    pub fn upsert_issue(&self, record: &IssueRecord) -> Result<UpsertOutcome> {
        record.validate()?;
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let existing = tx
            .query_row(
                &format!("SELECT {ISSUE_COLUMNS} FROM issues WHERE repo_key = ?1 AND number = ?2"),
                params![record.repo.key(), record.number as i64],
                issue_from_row,
            )
            .optional()?
            .transpose()?;
        let outcome = match existing {
            Some(ref stored) if stored == record => return Ok(UpsertOutcome::Unchanged),
            Some(_) => UpsertOutcome::Updated,
            None => UpsertOutcome::Inserted,
        };
        let labels = serde_json::to_string(&record.labels)
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        tx.execute(
            "INSERT OR REPLACE INTO issues
             (repo_key, number, owner, name, default_branch, title, body, state, labels, url, created_at, indexed_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12)",
            params![
                record.repo.key(),
                record.number as i64,
                record.repo.owner,
                record.repo.name,
                record.repo.default_branch,
                record.title,
                record.body,
                record.state.as_str(),
                labels,
                record.url,
                ts(&record.created_at),
                ts(&record.indexed_at),
            ],
        )?;
        tx.commit()?;
        Ok(outcome)
    }

    pub fn get_issue(&self, repo: &RepoRef, number: u64) -> Result<Option<IssueRecord>> {
        self.conn()
            .query_row(
                &format!("SELECT {ISSUE_COLUMNS} FROM issues WHERE repo_key = ?1 AND number = ?2"),
                params![repo.key(), number as i64],
                issue_from_row,
            )
            .optional()?
            .transpose()
    }

    /// Matching issues sorted by number ascending.
    pub fn query_issues(&self, repo: &RepoRef, filter: &IssueFilter) -> Result<Vec<IssueRecord>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {ISSUE_COLUMNS} FROM issues
             WHERE repo_key = ?1
               AND (?2 IS NULL OR state = ?2)
               AND (?3 IS NULL OR number != ?3)
             ORDER BY number ASC"
        ))?;
        let rows = stmt.query_map(
            params![
                repo.key(),
                filter.state.map(IssueState::as_str),
                filter.exclude_number.map(|n| n as i64)
            ],
            issue_from_row,
        )?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row??);
        }
        Ok(out)
    }

    pub fn count_issues(&self, repo: &RepoRef) -> Result<u64> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM issues WHERE repo_key = ?1",
            [repo.key()],
            |r| r.get(0),
        )?;
        Ok(n as u64)
    }

    // -- installation / sync state ------------------------------------------

    /// Records an installation. Returns the existing state untouched when the
    /// repository was already installed, and `true` when it was newly added.
    pub fn install_repo(&self, repo: &RepoRef, installed_at: DateTime<Utc>) -> Result<(SyncState, bool)> {
        repo.validate()?;
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        if let Some(state) = sync_state_tx(&tx, repo)? {
            return Ok((state, false));
        }
        tx.execute(
            "INSERT INTO repos (repo_key, owner, name, default_branch, installed_at, backfill_cursor, backfill_complete, last_sync_at)
             VALUES (?1, ?2, ?3, ?4, ?5, 1, 0, ?5)",
            params![repo.key(), repo.owner, repo.name, repo.default_branch, ts(&installed_at)],
        )?;
        let state = sync_state_tx(&tx, repo)?
            .ok_or_else(|| StoreError::Corrupt("installed repo vanished".into()))?;
        tx.commit()?;
        Ok((state, true))
    }

    pub fn sync_state(&self, repo: &RepoRef) -> Result<Option<SyncState>> {
        sync_state_tx(&self.conn(), repo)
    }

    pub fn sync_states(&self) -> Result<Vec<SyncState>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(&format!("SELECT {REPO_COLUMNS} FROM repos ORDER BY repo_key"))?;
        let rows = stmt.query_map([], sync_state_from_row)?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row??);
        }
        Ok(out)
    }

    /// Installation time; issues created strictly before it get no feedback.
    pub fn installation_cutoff(&self, repo: &RepoRef) -> Result<DateTime<Utc>> {
        self.sync_state(repo)?
            .map(|s| s.installed_at)
            .ok_or_else(|| StoreError::NotInstalled(repo.to_string()))
    }

    /// Persists the next page to fetch after a page has been fully indexed.
    pub fn set_backfill_cursor(&self, repo: &RepoRef, next_page: u32) -> Result<()> {
        let n = self.conn().execute(
            "UPDATE repos SET backfill_cursor = ?2, last_sync_at = ?3
             WHERE repo_key = ?1 AND backfill_complete = 0",
            params![repo.key(), next_page, ts(&Utc::now())],
        )?;
        if n == 0 && self.sync_state(repo)?.is_none() {
            return Err(StoreError::NotInstalled(repo.to_string()));
        }
        Ok(())
    }

    pub fn complete_backfill(&self, repo: &RepoRef) -> Result<()> {
        let n = self.conn().execute(
            "UPDATE repos SET backfill_cursor = NULL, backfill_complete = 1, last_sync_at = ?2
             WHERE repo_key = ?1",
            params![repo.key(), ts(&Utc::now())],
        )?;
        if n == 0 {
            return Err(StoreError::NotInstalled(repo.to_string()));
        }
        Ok(())
    }

    pub fn touch_sync(&self, repo: &RepoRef) -> Result<()> {
        self.conn().execute(
            "UPDATE repos SET last_sync_at = ?2 WHERE repo_key = ?1",
            params![repo.key(), ts(&Utc::now())],
        )?;
        Ok(())
    }

    // -- deliveries and the job queue ---------------------------------------

    /// Records the delivery id and persists the job in one transaction.
    /// Nothing is recorded when the queue is full.
    pub fn enqueue_delivery(
        &self,
        delivery_id: &str,
        event: &str,
        payload: &[u8],
        capacity: usize,
    ) -> Result<EnqueueOutcome> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        if delivery_seen(&tx, delivery_id)? {
            return Ok(EnqueueOutcome::Replayed);
        }
        let depth: i64 = tx.query_row(
            "SELECT COUNT(*) FROM jobs WHERE status IN ('pending', 'running')",
            [],
            |r| r.get(0),
        )?;
        if depth as usize >= capacity {
            return Ok(EnqueueOutcome::QueueFull);
        }
        let now = ts(&Utc::now());
        tx.execute(
            "INSERT INTO deliveries (delivery_id, event, received_at, disposition) VALUES (?1, ?2, ?3, 'accepted')",
            params![delivery_id, event, now],
        )?;
        tx.execute(
            "INSERT INTO jobs (delivery_id, event, payload, status, enqueued_at, updated_at)
             VALUES (?1, ?2, ?3, 'pending', ?4, ?4)",
            params![delivery_id, event, payload, now],
        )?;
        let id = tx.last_insert_rowid();
        tx.commit()?;
        Ok(EnqueueOutcome::Accepted(id))
    }

    /// Records a delivery that needs no job. Returns false on replay.
    pub fn record_ignored_delivery(&self, delivery_id: &str, event: &str) -> Result<bool> {
        let n = self.conn().execute(
            "INSERT OR IGNORE INTO deliveries (delivery_id, event, received_at, disposition) VALUES (?1, ?2, ?3, 'ignored')",
            params![delivery_id, event, ts(&Utc::now())],
        )?;
        Ok(n == 1)
    }

    pub fn delivery_seen(&self, delivery_id: &str) -> Result<bool> {
        delivery_seen(&self.conn(), delivery_id)
    }

    /// Atomically moves the oldest pending job to `running`.
    pub fn claim_job(&self) -> Result<Option<Job>> {
        let conn = self.conn();
        conn.query_row(
            "UPDATE jobs SET status = 'running', attempts = attempts + 1, updated_at = ?1
             WHERE id = (SELECT id FROM jobs WHERE status = 'pending' ORDER BY id LIMIT 1)
             RETURNING id, delivery_id, event, payload, status, attempts",
            [ts(&Utc::now())],
            job_from_row,
        )
        .optional()?
        .transpose()
    }

    pub fn finish_job(&self, id: i64, status: JobStatus, error: Option<&str>) -> Result<()> {
        self.conn().execute(
            "UPDATE jobs SET status = ?2, updated_at = ?3, last_error = ?4 WHERE id = ?1",
            params![id, status.as_str(), ts(&Utc::now()), error],
        )?;
        Ok(())
    }

    /// Returns jobs left `running` by a crashed process to the queue.
    pub fn requeue_running_jobs(&self) -> Result<usize> {
        Ok(self.conn().execute(
            "UPDATE jobs SET status = 'pending', updated_at = ?1 WHERE status = 'running'",
            [ts(&Utc::now())],
        )?)
    }

    /// Pending plus running jobs.
    pub fn queue_depth(&self) -> Result<usize> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM jobs WHERE status IN ('pending', 'running')",
            [],
            |r| r.get(0),
        )?;
        Ok(n as usize)
    }

    pub fn jobs(&self) -> Result<Vec<Job>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT id, delivery_id, event, payload, status, attempts FROM jobs ORDER BY id",
        )?;
        let rows = stmt.query_map([], job_from_row)?;
        let mut out = Vec::new();
        for row in rows {
            out.push(row??);
        }
        Ok(out)
    }

    // -- feedback ledger --------------------------------------------------

    pub fn feedback_recorded(&self, repo: &RepoRef, number: u64, action: &str) -> Result<bool> {
        let found: Option<i64> = self
            .conn()
            .query_row(
                "SELECT 1 FROM feedback_actions WHERE repo_key = ?1 AND number = ?2 AND action = ?3",
                params![repo.key(), number as i64, action],
                |r| r.get(0),
            )
            .optional()?;
        Ok(found.is_some())
    }

    pub fn record_feedback(&self, repo: &RepoRef, number: u64, action: &str) -> Result<()> {
        self.conn().execute(
            "INSERT OR IGNORE INTO feedback_actions (repo_key, number, action, done_at) VALUES (?1, ?2, ?3, ?4)",
            params![repo.key(), number as i64, action, ts(&Utc::now())],
        )?;
        Ok(())
    }

    // -- operations log ---------------------------------------------------

    pub fn log_op(&self, entry: &OpLogEntry) -> Result<()> {
        self.conn().execute(
            "INSERT INTO ops_log (at, repo_key, number, category, action, outcome, detail)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)",
            params![
                ts(&entry.at),
                entry.repo_key,
                entry.number.map(|n| n as i64),
                entry.category,
                entry.action,
                entry.outcome.as_str(),
                entry.detail
            ],
        )?;
        Ok(())
    }

    pub fn ops_log(&self) -> Result<Vec<OpLogEntry>> {
        self.ops_log_where(None)
    }

    pub fn ops_log_for(&self, repo: &RepoRef, number: u64) -> Result<Vec<OpLogEntry>> {
        self.ops_log_where(Some((repo.key(), number)))
    }

    fn ops_log_where(&self, issue: Option<(String, u64)>) -> Result<Vec<OpLogEntry>> {
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT at, repo_key, number, category, action, outcome, detail FROM ops_log
             WHERE (?1 IS NULL OR (repo_key = ?1 AND number = ?2))
             ORDER BY id",
        )?;
        let (key, number) = match issue {
            Some((k, n)) => (Some(k), Some(n as i64)),
            None => (None, None),
        };
        let rows = stmt.query_map(params![key, number], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, Option<String>>(1)?,
                r.get::<_, Option<i64>>(2)?,
                r.get::<_, String>(3)?,
                r.get::<_, String>(4)?,
                r.get::<_, String>(5)?,
                r.get::<_, String>(6)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (at, repo_key, number, category, action, outcome, detail) = row?;
            out.push(OpLogEntry {
                at: parse_ts(&at)?,
                repo_key,
                number: number.map(|n| n as u64),
                category,
                action,
                outcome: OpOutcome::parse(&outcome)?,
                detail,
            });
        }
        Ok(out)
    }
}

const ISSUE_COLUMNS: &str =
    "owner, name, default_branch, number, title, body, state, labels, url, created_at, indexed_at";

fn issue_from_row(r: &Row<'_>) -> rusqlite::Result<Result<IssueRecord>> {
    let owner: String = r.get(0)?;
    let name: String = r.get(1)?;
    let default_branch: String = r.get(2)?;
    let number: i64 = r.get(3)?;
    let title: String = r.get(4)?;
    let body: String = r.get(5)?;
    let state: String = r.get(6)?;
    let labels: String = r.get(7)?;
    let url: String = r.get(8)?;
    let created_at: String = r.get(9)?;
    let indexed_at: String = r.get(10)?;
    Ok((|| {
        let labels: BTreeSet<String> =
            serde_json::from_str(&labels).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        Ok(IssueRecord {
            repo: RepoRef {
                owner,
                name,
                default_branch,
            },
            number: number as u64,
            title,
            body,
            state: state.parse()?,
            labels,
            url,
            created_at: parse_ts(&created_at)?,
            indexed_at: parse_ts(&indexed_at)?,
        })
    })())
}

const REPO_COLUMNS: &str =
    "owner, name, default_branch, installed_at, backfill_cursor, backfill_complete, last_sync_at";

fn sync_state_from_row(r: &Row<'_>) -> rusqlite::Result<Result<SyncState>> {
    let owner: String = r.get(0)?;
    let name: String = r.get(1)?;
    let default_branch: String = r.get(2)?;
    let installed_at: String = r.get(3)?;
    let cursor: Option<u32> = r.get(4)?;
    let complete: bool = r.get(5)?;
    let last_sync_at: String = r.get(6)?;
    Ok((|| {
        Ok(SyncState {
            repo: RepoRef {
                owner,
                name,
                default_branch,
            },
            installed_at: parse_ts(&installed_at)?,
            backfill_cursor: if complete { None } else { cursor },
            backfill_complete: complete,
            last_sync_at: parse_ts(&last_sync_at)?,
        })
    })())
}

fn sync_state_tx(conn: &Connection, repo: &RepoRef) -> Result<Option<SyncState>> {
    conn.query_row(
        &format!("SELECT {REPO_COLUMNS} FROM repos WHERE repo_key = ?1"),
        [repo.key()],
        sync_state_from_row,
    )
    .optional()?
    .transpose()
}

fn delivery_seen(conn: &Connection, delivery_id: &str) -> Result<bool> {
    let found: Option<i64> = conn
        .query_row(
            "SELECT 1 FROM deliveries WHERE delivery_id = ?1",
            [delivery_id],
            |r| r.get(0),
        )
        .optional()?;
    Ok(found.is_some())
}

fn job_from_row(r: &Row<'_>) -> rusqlite::Result<Result<Job>> {
    let id: i64 = r.get(0)?;
    let delivery_id: String = r.get(1)?;
    let event: String = r.get(2)?;
    let payload: Vec<u8> = r.get(3)?;
    let status: String = r.get(4)?;
    let attempts: u32 = r.get(5)?;
    Ok(JobStatus::parse(&status).map(|status| Job {
        id,
        delivery_id,
        event,
        payload,
        status,
        attempts,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn repo() -> RepoRef {
        RepoRef::new("octo", "widgets", "main").unwrap()
    }

    fn issue(number: u64, title: &str) -> IssueRecord {
        let t = Utc.with_ymd_and_hms(2024, 3, 1, 12, 0, 0).unwrap();
        IssueRecord {
            repo: repo(),
            number,
            title: title.into(),
            body: String::new(),
            state: IssueState::Open,
            labels: BTreeSet::new(),
            url: format!("https://forge.test/octo/widgets/issues/{number}"),
            created_at: t,
            indexed_at: t + Duration::nanoseconds(123_456_789),
        }
    }

    #[test]
    fn upsert_transitions() {
        let store = Store::open_in_memory().unwrap();
        let mut r = issue(1, "Crash on save");
        assert_eq!(store.upsert_issue(&r).unwrap(), UpsertOutcome::Inserted);
        assert_eq!(store.upsert_issue(&r).unwrap(), UpsertOutcome::Unchanged);
        r.title = "Crash on save (again)".into();
        assert_eq!(store.upsert_issue(&r).unwrap(), UpsertOutcome::Updated);
        assert_eq!(store.get_issue(&repo(), 1).unwrap().unwrap(), r);
        assert_eq!(store.count_issues(&repo()).unwrap(), 1);
    }

    #[test]
    fn upsert_rejects_invalid_records() {
        let store = Store::open_in_memory().unwrap();
        let mut r = issue(1, "x");
        r.url.clear();
        let err = store.upsert_issue(&r).unwrap_err();
        assert!(matches!(err, StoreError::Invalid(_)));
        assert!(!err.is_retriable());
        r = issue(0, "x");
        assert!(store.upsert_issue(&r).is_err());
    }

    #[test]
    fn query_filters() {
        let store = Store::open_in_memory().unwrap();
        assert!(store.query_issues(&repo(), &IssueFilter::default()).unwrap().is_empty());
        for n in [3, 1, 2] {
            store.upsert_issue(&issue(n, "t")).unwrap();
        }
        let mut closed = issue(4, "t");
        closed.state = IssueState::Closed;
        store.upsert_issue(&closed).unwrap();

        let numbers = |f: IssueFilter| -> Vec<u64> {
            store.query_issues(&repo(), &f).unwrap().iter().map(|i| i.number).collect()
        };
        assert_eq!(numbers(IssueFilter::default()), [1, 2, 3, 4]);
        assert_eq!(
            numbers(IssueFilter { exclude_number: Some(2), ..Default::default() }),
            [1, 3, 4]
        );
        assert_eq!(
            numbers(IssueFilter { state: Some(IssueState::Open), ..Default::default() }),
            [1, 2, 3]
        );
    }

    #[test]
    fn installation_cutoff_requires_install() {
        let store = Store::open_in_memory().unwrap();
        assert!(matches!(
            store.installation_cutoff(&repo()),
            Err(StoreError::NotInstalled(_))
        ));
        let t = Utc::now();
        let (state, fresh) = store.install_repo(&repo(), t).unwrap();
        assert!(fresh);
        assert_eq!(state.backfill_cursor, Some(1));
        assert_eq!(store.installation_cutoff(&repo()).unwrap(), t);

        let (again, fresh) = store.install_repo(&repo(), t + Duration::hours(1)).unwrap();
        assert!(!fresh);
        assert_eq!(again.installed_at, t);

        store.set_backfill_cursor(&repo(), 3).unwrap();
        assert_eq!(store.sync_state(&repo()).unwrap().unwrap().backfill_cursor, Some(3));
        store.complete_backfill(&repo()).unwrap();
        let done = store.sync_state(&repo()).unwrap().unwrap();
        assert!(done.backfill_complete);
        assert_eq!(done.backfill_cursor, None);
    }

    #[test]
    fn durable_across_handles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.db");
        let r = issue(7, "durable");
        {
            let store = Store::open(&path).unwrap();
            store.upsert_issue(&r).unwrap();
        }
        let reopened = Store::open(&path).unwrap();
        assert_eq!(reopened.get_issue(&repo(), 7).unwrap().unwrap(), r);
        assert_eq!(reopened.schema_version().unwrap(), SCHEMA_VERSION);
    }

    #[test]
    fn queue_lifecycle() {
        let store = Store::open_in_memory().unwrap();
        let id = match store.enqueue_delivery("d1", "issues", b"{}", 2).unwrap() {
            EnqueueOutcome::Accepted(id) => id,
            other => panic!("{other:?}"),
        };
        assert_eq!(
            store.enqueue_delivery("d1", "issues", b"{}", 2).unwrap(),
            EnqueueOutcome::Replayed
        );
        assert!(matches!(
            store.enqueue_delivery("d2", "issues", b"{}", 2).unwrap(),
            EnqueueOutcome::Accepted(_)
        ));
        assert_eq!(
            store.enqueue_delivery("d3", "issues", b"{}", 2).unwrap(),
            EnqueueOutcome::QueueFull
        );
        // A rejected delivery is not recorded, so a redelivery can succeed later.
        assert!(!store.delivery_seen("d3").unwrap());

        let job = store.claim_job().unwrap().unwrap();
        assert_eq!(job.id, id);
        assert_eq!(job.status, JobStatus::Running);
        assert_eq!(job.attempts, 1);
        assert_eq!(store.requeue_running_jobs().unwrap(), 1);
        let job = store.claim_job().unwrap().unwrap();
        assert_eq!((job.id, job.attempts), (id, 2));
        store.finish_job(job.id, JobStatus::Done, None).unwrap();
        assert_eq!(store.queue_depth().unwrap(), 1);
    }

    #[test]
    fn ignored_deliveries_are_recorded_once() {
        let store = Store::open_in_memory().unwrap();
        assert!(store.record_ignored_delivery("x", "ping").unwrap());
        assert!(!store.record_ignored_delivery("x", "ping").unwrap());
        assert_eq!(
            store.enqueue_delivery("x", "issues", b"{}", 10).unwrap(),
            EnqueueOutcome::Replayed
        );
    }

    #[test]
    fn feedback_ledger_and_ops_log() {
        let store = Store::open_in_memory().unwrap();
        assert!(!store.feedback_recorded(&repo(), 5, "comment:similar_issues").unwrap());
        store.record_feedback(&repo(), 5, "comment:similar_issues").unwrap();
        store.record_feedback(&repo(), 5, "comment:similar_issues").unwrap();
        assert!(store.feedback_recorded(&repo(), 5, "comment:similar_issues").unwrap());

        store
            .log_op(&OpLogEntry::new("post", "label", OpOutcome::Success, "ok").for_issue(&repo(), 5))
            .unwrap();
        store
            .log_op(&OpLogEntry::new("pipeline", "start", OpOutcome::Skipped, ""))
            .unwrap();
        assert_eq!(store.ops_log().unwrap().len(), 2);
        let for_issue = store.ops_log_for(&repo(), 5).unwrap();
        assert_eq!(for_issue.len(), 1);
        assert_eq!(for_issue[0].outcome, OpOutcome::Success);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn upserts_keep_one_record_per_number(ops in prop::collection::vec((1u64..6, "[a-z ]{0,12}"), 1..30)) {
                let store = Store::open_in_memory().unwrap();
                let mut latest = std::collections::BTreeMap::new();
                for (n, title) in ops {
                    let r = issue(n, &title);
                    store.upsert_issue(&r).unwrap();
                    prop_assert_eq!(store.upsert_issue(&r).unwrap(), UpsertOutcome::Unchanged);
                    latest.insert(n, r);
                }
                let all = store.query_issues(&repo(), &IssueFilter::default()).unwrap();
                prop_assert_eq!(all.len(), latest.len());
                for r in &all {
                    prop_assert_eq!(r, &latest[&r.number]);
                }
                for n in 1..6 {
                    let without = store
                        .query_issues(&repo(), &IssueFilter { exclude_number: Some(n), ..Default::default() })
                        .unwrap();
                    prop_assert!(without.iter().all(|r| r.number != n));
                }
            }
        }
    }
}
