//! REST client for the forge: paged issue listing, the file tree, labels and
//! comments. Transient failures are retried with capped exponential backoff.

use std::collections::BTreeSet;
use std::time::Duration;

use bytes::Bytes;
use chrono::Utc;
use futures::stream::{self, Stream, TryStreamExt};
use reqwest::header::{HeaderMap, ACCEPT, AUTHORIZATION, RETRY_AFTER, USER_AGENT};
use reqwest::{Method, StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tracing::{debug, warn};
use triage_core::{CodeFileRef, IssueRecord, Label, RepoRef};

use crate::config::{Config, Secret};
use crate::wire::{AddLabels, NewComment, WireComment, WireIssue, WireLabel, WireRepo, WireTree};

pub const MAX_PAGE_SIZE: u32 = 100;

#[derive(Debug, Error)]
pub enum ForgeError {
    /// The forge answered with a status that retrying will not fix.
    #[error("{context}: HTTP {status}: {message}")]
    Status {
        context: String,
        status: u16,
        message: String,
    },
    /// Every attempt hit a transient failure.
    #[error("{context}: giving up after {attempts} attempts: {message}")]
    Exhausted {
        context: String,
        attempts: u32,
        message: String,
    },
    #[error("{context}: malformed response: {message}")]
    Decode { context: String, message: String },
    #[error("invalid client setup: {0}")]
    Setup(String),
}

impl ForgeError {
    /// True when a later attempt may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, ForgeError::Exhausted { .. })
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ForgeError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ForgeError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub initial_delay: Duration,
    pub factor: u32,
    pub max_delay: Duration,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            initial_delay: Duration::from_secs(1),
            factor: 2,
            max_delay: Duration::from_secs(60),
            max_attempts: 6,
        }
    }
}

impl RetryPolicy {
    /// Millisecond delays for tests.
    pub fn fast() -> Self {
        Self {
            initial_delay: Duration::from_millis(2),
            max_delay: Duration::from_millis(20),
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (0 for the first retry).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = (self.factor.max(1) as u64).saturating_pow(retry);
        let ms = (self.initial_delay.as_millis() as u64).saturating_mul(factor);
        Duration::from_millis(ms).min(self.max_delay)
    }
}

fn transient_status(status: StatusCode) -> bool {
    status == StatusCode::FORBIDDEN
        || status == StatusCode::TOO_MANY_REQUESTS
        || status.is_server_error()
}

fn retry_after(headers: &HeaderMap) -> Option<Duration> {
    headers
        .get(RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<u64>()
        .ok()
        .map(Duration::from_secs)
}

fn snippet(body: &[u8]) -> String {
    let text = String::from_utf8_lossy(body);
    let mut s: String = text.chars().take(200).collect();
    if text.chars().count() > 200 {
        s.push('…');
    }
    s
}

/// One page of the issues listing. `raw_len` counts pull requests too, so
/// a page holding only pull requests does not end the listing.
#[derive(Debug, Clone, PartialEq)]
pub struct IssuePage {
    pub page: u32,
    pub page_size: u32,
    pub issues: Vec<IssueRecord>,
    pub raw_len: usize,
}

impl IssuePage {
    /// An empty or short page ends the listing.
    pub fn is_last(&self) -> bool {
        self.raw_len < self.page_size as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelStatus {
    Created,
    Existing,
}

#[derive(Clone)]
pub struct ForgeClient {
    http: reqwest::Client,
    api_base: Url,
    html_base: String,
    token: Secret,
    retry: RetryPolicy,
}

impl std::fmt::Debug for ForgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForgeClient")
            .field("api_base", &self.api_base.as_str())
            .field("html_base", &self.html_base)
            .field("token", &self.token)
            .field("retry", &self.retry)
            .finish()
    }
}

impl ForgeClient {
    pub fn new(api_base_url: &str, html_base_url: &str, token: Secret) -> Result<Self> {
        let api_base = Url::parse(api_base_url.trim_end_matches('/'))
            .map_err(|e| ForgeError::Setup(format!("api_base_url: {e}")))?;
        if api_base.cannot_be_a_base() {
            return Err(ForgeError::Setup("api_base_url cannot be a base URL".into()));
        }
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| ForgeError::Setup(e.to_string()))?;
        Ok(Self {
            http,
            api_base,
            html_base: html_base_url.trim_end_matches('/').to_string(),
            token,
            retry: RetryPolicy::default(),
        })
    }

    pub fn from_config(config: &Config) -> Result<Self> {
        Ok(Self::new(
            &config.forge.api_base_url,
            &config.forge.html_base_url,
            config.forge.token.clone(),
        )?
        .with_retry(config.retry_policy()))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    fn url(&self, segments: &[&str], query: &[(&str, String)]) -> Url {
        let mut url = self.api_base.clone();
        url.path_segments_mut()
            .expect("checked in new")
            .pop_if_empty()
            .extend(segments);
        if !query.is_empty() {
            url.query_pairs_mut().extend_pairs(query.iter().map(|(k, v)| (*k, v.as_str())));
        }
        url
    }

    /// Sends one request, retrying transient failures. Returns the final
    /// status and body for the caller to interpret.
    async fn send(
        &self,
        method: Method,
        url: Url,
        body: Option<Vec<u8>>,
        context: &str,
    ) -> Result<(StatusCode, Bytes)> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last_error = String::new();
        let mut server_wait = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                tokio::time::sleep(self.retry_delay(attempt - 1, server_wait.take())).await;
            }
            let mut request = self
                .http
                .request(method.clone(), url.clone())
                .header(ACCEPT, "application/vnd.github+json")
                .header(USER_AGENT, "triage-assist");
            if !self.token.is_empty() {
                request = request.header(AUTHORIZATION, format!("Bearer {}", self.token.expose()));
            }
            if let Some(b) = &body {
                request = request
                    .header(reqwest::header::CONTENT_TYPE, "application/json")
                    .body(b.clone());
            }
            let response = match request.send().await {
                Ok(r) => r,
                Err(e) => {
                    last_error = format!("transport error: {}", e.without_url());
                    debug!(context, attempt, error = %last_error, "retrying");
                    continue;
                }
            };
            let status = response.status();
            let wait = retry_after(response.headers());
            let bytes = match response.bytes().await {
                Ok(b) => b,
                Err(e) => {
                    last_error = format!("connection lost while reading body: {}", e.without_url());
                    debug!(context, attempt, error = %last_error, "retrying");
                    continue;
                }
            };
            if transient_status(status) {
                last_error = format!("HTTP {}: {}", status.as_u16(), snippet(&bytes));
                debug!(context, attempt, error = %last_error, "retrying");
                server_wait = wait;
                continue;
            }
            return Ok((status, bytes));
        }
        warn!(context, attempts, "giving up");
        Err(ForgeError::Exhausted {
            context: context.to_string(),
            attempts,
            message: last_error,
        })
    }

    fn retry_delay(&self, retry: u32, retry_after: Option<Duration>) -> Duration {
        let base = self.retry.delay(retry);
        match retry_after {
            Some(wait) => base.max(wait).min(self.retry.max_delay),
            None => base,
        }
    }

    fn status_error(context: &str, status: StatusCode, body: &[u8]) -> ForgeError {
        ForgeError::Status {
            context: context.to_string(),
            status: status.as_u16(),
            message: snippet(body),
        }
    }

    fn decode<T: DeserializeOwned>(context: &str, body: &[u8]) -> Result<T> {
        serde_json::from_slice(body).map_err(|e| ForgeError::Decode {
            context: context.to_string(),
            message: e.to_string(),
        })
    }

    fn encode<T: Serialize>(value: &T) -> Vec<u8> {
        serde_json::to_vec(value).expect("wire types serialize")
    }

    async fn get_json<T: DeserializeOwned>(&self, url: Url, context: &str) -> Result<T> {
        let (status, body) = self.send(Method::GET, url, None, context).await?;
        if !status.is_success() {
            return Err(Self::status_error(context, status, &body));
        }
        Self::decode(context, &body)
    }

    pub async fn get_repo(&self, owner: &str, name: &str) -> Result<RepoRef> {
        let context = format!("GET repository {owner}/{name}");
        let repo: WireRepo = self.get_json(self.url(&["repos", owner, name], &[]), &context).await?;
        repo.to_ref().map_err(|e| ForgeError::Decode {
            context,
            message: e.to_string(),
        })
    }

    /// One page of issues in creation order, all states, pull requests
    /// dropped.
    pub async fn fetch_issue_page(&self, repo: &RepoRef, page: u32, page_size: u32) -> Result<IssuePage> {
        if page == 0 || !(1..=MAX_PAGE_SIZE).contains(&page_size) {
            return Err(ForgeError::Setup(format!(
                "page {page} with page_size {page_size} (pages start at 1, size in [1, {MAX_PAGE_SIZE}])"
            )));
        }
        let context = format!("list issues of {repo}, page {page}");
        let url = self.url(
            &["repos", &repo.owner, &repo.name, "issues"],
            &[
                ("state", "all".into()),
                ("sort", "created".into()),
                ("direction", "asc".into()),
                ("per_page", page_size.to_string()),
                ("page", page.to_string()),
            ],
        );
        let raw: Vec<WireIssue> = self.get_json(url, &context).await?;
        let now = Utc::now();
        let raw_len = raw.len();
        let issues = raw
            .iter()
            .filter(|i| !i.is_pull_request())
            .map(|i| {
                i.to_record(repo, now).map_err(|e| ForgeError::Decode {
                    context: context.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IssuePage {
            page,
            page_size,
            issues,
            raw_len,
        })
    }

    /// Every issue, page by page from `start_page`, until an empty or short
    /// page.
    pub fn list_issues_paged<'a>(
        &'a self,
        repo: &'a RepoRef,
        page_size: u32,
        start_page: u32,
    ) -> impl Stream<Item = Result<IssueRecord>> + 'a {
        stream::try_unfold(Some(start_page.max(1)), move |next| async move {
            let Some(page) = next else { return Ok(None) };
            let fetched = self.fetch_issue_page(repo, page, page_size).await?;
            let next = (!fetched.is_last()).then_some(page + 1);
            Ok(Some((stream::iter(fetched.issues.into_iter().map(Ok)), next)))
        })
        .try_flatten()
    }

    /// Blobs of the default branch's recursive tree. An empty repository
    /// yields an empty list.
    pub async fn list_files(&self, repo: &RepoRef) -> Result<Vec<CodeFileRef>> {
        let context = format!("read file tree of {repo}@{}", repo.default_branch);
        let url = self.url(
            &["repos", &repo.owner, &repo.name, "git", "trees", &repo.default_branch],
            &[("recursive", "1".into())],
        );
        let (status, body) = self.send(Method::GET, url, None, &context).await?;
        if status == StatusCode::CONFLICT {
            return Ok(Vec::new());
        }
        if !status.is_success() {
            return Err(Self::status_error(&context, status, &body));
        }
        let tree: WireTree = Self::decode(&context, &body)?;
        if tree.truncated {
            warn!(%repo, "file tree truncated by the forge");
        }
        let paths: BTreeSet<String> = tree
            .tree
            .into_iter()
            .filter(|e| e.kind == "blob")
            .map(|e| e.path)
            .collect();
        paths
            .into_iter()
            .map(|path| {
                let url = format!(
                    "{}/{}/{}/blob/{}/{}",
                    self.html_base, repo.owner, repo.name, repo.default_branch, path
                );
                CodeFileRef::new(repo.clone(), path, url).map_err(|e| ForgeError::Decode {
                    context: context.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    /// Creates the label when missing. An existing label is left as is,
    /// whatever its color.
    pub async fn ensure_label(&self, repo: &RepoRef, label: &Label) -> Result<LabelStatus> {
        let context = format!("look up label `{}` in {repo}", label.name);
        let url = self.url(&["repos", &repo.owner, &repo.name, "labels", &label.name], &[]);
        let (status, body) = self.send(Method::GET, url, None, &context).await?;
        if status.is_success() {
            return Ok(LabelStatus::Existing);
        }
        if status != StatusCode::NOT_FOUND {
            return Err(Self::status_error(&context, status, &body));
        }
        let context = format!("create label `{}` in {repo}", label.name);
        let url = self.url(&["repos", &repo.owner, &repo.name, "labels"], &[]);
        let payload = Self::encode(&WireLabel {
            name: label.name.clone(),
            color: label.color.clone(),
        });
        let (status, body) = self.send(Method::POST, url, Some(payload), &context).await?;
        match status {
            s if s.is_success() => Ok(LabelStatus::Created),
            // Created concurrently by someone else.
            StatusCode::UNPROCESSABLE_ENTITY => Ok(LabelStatus::Existing),
            s => Err(Self::status_error(&context, s, &body)),
        }
    }

    pub async fn add_labels(&self, repo: &RepoRef, number: u64, names: &[String]) -> Result<()> {
        let context = format!("add labels to {repo}#{number}");
        let url = self.url(
            &["repos", &repo.owner, &repo.name, "issues", &number.to_string(), "labels"],
            &[],
        );
        let payload = Self::encode(&AddLabels { labels: names.to_vec() });
        let (status, body) = self.send(Method::POST, url, Some(payload), &context).await?;
        if !status.is_success() {
            return Err(Self::status_error(&context, status, &body));
        }
        Ok(())
    }

    /// All comments on an issue, oldest first.
    pub async fn list_comments(&self, repo: &RepoRef, number: u64) -> Result<Vec<WireComment>> {
        let mut out = Vec::new();
        for page in 1u32.. {
            let context = format!("list comments of {repo}#{number}, page {page}");
            let url = self.url(
                &["repos", &repo.owner, &repo.name, "issues", &number.to_string(), "comments"],
                &[("per_page", MAX_PAGE_SIZE.to_string()), ("page", page.to_string())],
            );
            let batch: Vec<WireComment> = self.get_json(url, &context).await?;
            let done = batch.len() < MAX_PAGE_SIZE as usize;
            out.extend(batch);
            if done {
                break;
            }
        }
        Ok(out)
    }

    pub async fn post_comment(&self, repo: &RepoRef, number: u64, body: &str) -> Result<u64> {
        let context = format!("comment on {repo}#{number}");
        let url = self.url(
            &["repos", &repo.owner, &repo.name, "issues", &number.to_string(), "comments"],
            &[],
        );
        let payload = Self::encode(&NewComment { body: body.to_string() });
        let (status, response) = self.send(Method::POST, url, Some(payload), &context).await?;
        if !status.is_success() {
            return Err(Self::status_error(&context, status, &response));
        }
        let created: WireComment = Self::decode(&context, &response)?;
        Ok(created.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy::default();
        let delays: Vec<u64> = (0..8).map(|r| p.delay(r).as_secs()).collect();
        assert_eq!(delays, [1, 2, 4, 8, 16, 32, 60, 60]);
        assert_eq!(p.max_attempts, 6);
        assert_eq!(p.delay(200), Duration::from_secs(60));
    }

    #[test]
    fn retry_after_raises_but_never_exceeds_cap() {
        let c = ForgeClient::new("http://127.0.0.1:1", "http://h", Secret::default()).unwrap();
        assert_eq!(c.retry_delay(0, Some(Duration::from_secs(5))), Duration::from_secs(5));
        assert_eq!(c.retry_delay(0, Some(Duration::from_secs(500))), Duration::from_secs(60));
        assert_eq!(c.retry_delay(3, Some(Duration::from_secs(1))), Duration::from_secs(8));
    }

    #[test]
    fn transient_statuses() {
        for s in [403, 429, 500, 502, 503] {
            assert!(transient_status(StatusCode::from_u16(s).unwrap()), "{s}");
        }
        for s in [200, 201, 400, 401, 404, 409, 422] {
            assert!(!transient_status(StatusCode::from_u16(s).unwrap()), "{s}");
        }
    }

    #[test]
    fn urls_encode_segments() {
        let c = ForgeClient::new("http://forge.test/api/v3/", "http://h", Secret::default()).unwrap();
        let u = c.url(&["repos", "o", "r", "labels", "needs triage"], &[("page", "2".into())]);
        assert_eq!(u.as_str(), "http://forge.test/api/v3/repos/o/r/labels/needs%20triage?page=2");
    }

    #[test]
    fn debug_hides_token() {
        let c = ForgeClient::new("http://forge.test", "http://h", Secret::new("tok123")).unwrap();
        assert!(!format!("{c:?}").contains("tok123"));
    }
}
