//! In-memory mock forge. It serves the REST subset the client uses, signs
//! and sends webhook deliveries, and keeps a ledger of everything posted so
//! tests can assert on it. Scripted faults make chosen requests fail.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Duration as ChronoDuration, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use triage_core::render::comment_marker;
use triage_core::CommentKind;

use crate::webhook::{sign, DELIVERY_HEADER, EVENT_HEADER, SIGNATURE_HEADER};
use crate::wire::{
    AddLabels, IssuesEvent, NewComment, WireComment, WireIssue, WireLabel, WireRepo, WireTree,
    WireTreeEntry, WireUser,
};

/// Path used to match delivery faults in a script.
pub const WEBHOOK_FAULT_PATH: &str = "/webhook";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no webhook url registered")]
    NoWebhook,
    #[error("unknown delivery `{0}`")]
    UnknownDelivery(String),
    #[error("unknown issue #{0}")]
    UnknownIssue(u64),
    #[error("delivery failed: {0}")]
    Transport(String),
    #[error("cannot read fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureIssue {
    #[serde(default)]
    pub number: Option<u64>,
    pub title: String,
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default = "open_state")]
    pub state: String,
    #[serde(default)]
    pub created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub pull_request: bool,
}

fn open_state() -> String {
    "open".into()
}

/// Repository fixture: `{"owner", "name", "default_branch", "issues": [],
/// "files": [], "labels": []}`, everything but the lists optional.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default = "default_owner")]
    pub owner: String,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_branch")]
    pub default_branch: String,
    #[serde(default)]
    pub issues: Vec<FixtureIssue>,
    #[serde(default)]
    pub files: Vec<String>,
    /// Labels that already exist in the repository.
    #[serde(default)]
    pub labels: Vec<WireLabel>,
}

fn default_owner() -> String {
    "octo".into()
}

fn default_name() -> String {
    "widgets".into()
}

fn default_branch() -> String {
    "main".into()
}

impl Default for Fixture {
    fn default() -> Self {
        Self {
            owner: default_owner(),
            name: default_name(),
            default_branch: default_branch(),
            issues: Vec::new(),
            files: Vec::new(),
            labels: Vec::new(),
        }
    }
}

impl Fixture {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Fixture(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultBehavior {
    #[serde(rename = "status-429")]
    Status429,
    #[serde(rename = "status-500")]
    Status500,
    /// Sends headers and part of a body, then resets the connection.
    #[serde(rename = "drop-connection")]
    DropConnection,
    /// Sends a webhook delivery twice with the same delivery id.
    #[serde(rename = "deliver-duplicate")]
    DeliverDuplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultMatch {
    /// Any method when absent.
    #[serde(default)]
    pub method: Option<String>,
    /// Exact path, or a prefix when it ends with `*`.
    pub path: String,
    /// Substring the query string must contain.
    #[serde(default)]
    pub query: Option<String>,
}

impl FaultMatch {
    fn matches(&self, method: &str, path: &str, query: &str) -> bool {
        if let Some(m) = &self.method {
            if !m.eq_ignore_ascii_case(method) {
                return false;
            }
        }
        let path_ok = match self.path.strip_suffix('*') {
            Some(prefix) => path.starts_with(prefix),
            None => path == self.path,
        };
        path_ok && self.query.as_deref().is_none_or(|q| query.contains(q))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    #[serde(rename = "match")]
    pub matcher: FaultMatch,
    pub behavior: FaultBehavior,
    /// How many matching requests the rule affects.
    #[serde(default = "one")]
    pub times: u32,
}

fn one() -> u32 {
    1
}

impl FaultRule {
    pub fn new(method: Option<&str>, path: &str, behavior: FaultBehavior, times: u32) -> Self {
        Self {
            matcher: FaultMatch {
                method: method.map(str::to_string),
                path: path.to_string(),
                query: None,
            },
            behavior,
            times,
        }
    }

    pub fn with_query(mut self, query: &str) -> Self {
        self.matcher.query = Some(query.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimComment {
    pub id: u64,
    pub issue: u64,
    pub body: String,
    pub received_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub method: String,
    pub path: String,
    pub query: String,
    pub status: u16,
    /// Name of the fault that answered instead of the handler.
    pub fault: Option<FaultBehavior>,
}

/// Everything the simulator knows and has been sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimLedger {
    pub owner: String,
    pub name: String,
    pub default_branch: String,
    pub issues: BTreeMap<u64, WireIssue>,
    pub files: Vec<String>,
    pub comments: Vec<SimComment>,
    pub labels: BTreeMap<u64, BTreeSet<(String, String)>>,
    pub repo_labels: BTreeMap<String, String>,
    pub deliveries_sent: Vec<String>,
    pub fault_script: Vec<FaultRule>,
    pub requests: Vec<RequestRecord>,
}

fn fixture_time(number: u64) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap() + ChronoDuration::hours(number as i64)
}

impl SimLedger {
    pub fn seed(fixture: &Fixture) -> Self {
        let base = format!("https://forge.test/{}/{}", fixture.owner, fixture.name);
        let mut issues = BTreeMap::new();
        for (i, fi) in fixture.issues.iter().enumerate() {
            let number = fi.number.unwrap_or(i as u64 + 1);
            issues.insert(
                number,
                WireIssue {
                    number,
                    title: fi.title.clone(),
                    body: fi.body.clone(),
                    state: fi.state.clone(),
                    html_url: format!("{base}/issues/{number}"),
                    created_at: fi.created_at.unwrap_or_else(|| fixture_time(number)),
                    labels: fi
                        .labels
                        .iter()
                        .map(|n| WireLabel { name: n.clone(), color: "ededed".into() })
                        .collect(),
                    pull_request: fi.pull_request.then(|| json!({"url": format!("{base}/pull/{number}")})),
                },
            );
        }
        let files: BTreeSet<String> = fixture.files.iter().cloned().collect();
        Self {
            owner: fixture.owner.clone(),
            name: fixture.name.clone(),
            default_branch: fixture.default_branch.clone(),
            issues,
            files: files.into_iter().collect(),
            comments: Vec::new(),
            labels: BTreeMap::new(),
            repo_labels: fixture
                .labels
                .iter()
                .map(|l| (l.name.clone(), l.color.clone()))
                .collect(),
            deliveries_sent: Vec::new(),
            fault_script: Vec::new(),
            requests: Vec::new(),
        }
    }

    fn repo(&self) -> WireRepo {
        WireRepo {
            name: self.name.clone(),
            owner: WireUser { login: self.owner.clone() },
            default_branch: self.default_branch.clone(),
        }
    }

    fn html_base(&self) -> String {
        format!("https://forge.test/{}/{}", self.owner, self.name)
    }

    /// Consumes one use of the first live rule matching the request.
    fn take_fault(&mut self, method: &str, path: &str, query: &str) -> Option<FaultBehavior> {
        let rule = self
            .fault_script
            .iter_mut()
            .find(|r| r.times > 0 && r.matcher.matches(method, path, query))?;
        rule.times -= 1;
        Some(rule.behavior)
    }
}

/// Comments and labels recorded for one issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeedbackSnapshot {
    pub number: u64,
    pub comments: Vec<String>,
    pub labels: BTreeSet<(String, String)>,
}

impl FeedbackSnapshot {
    /// Comments carrying this tool's marker for `kind`.
    pub fn tool_comments(&self, kind: CommentKind) -> Vec<&str> {
        let marker = comment_marker(kind);
        self.comments
            .iter()
            .filter(|c| c.contains(&marker))
            .map(String::as_str)
            .collect()
    }

    pub fn label_names(&self) -> BTreeSet<&str> {
        self.labels.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.comments.is_empty() && self.labels.is_empty()
    }
}

/// Fields of an issue to open through the simulator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewIssue {
    pub title: String,
    #[serde(default)]
    pub body: String,
    /// Defaults to now.
    #[serde(default)]
    pub created_at: Option<DateTime<Utc>>,
}

impl NewIssue {
    pub fn new(title: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            body: body.into(),
            created_at: None,
        }
    }
}

/// Result of sending one event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Emission {
    pub number: u64,
    pub delivery_id: String,
    /// One HTTP status per attempt sent to the webhook.
    pub statuses: Vec<u16>,
}

struct SentDelivery {
    event: String,
    body: Vec<u8>,
}

pub struct ForgeSim {
    ledger: Mutex<SimLedger>,
    sent: Mutex<HashMap<String, SentDelivery>>,
    token: Option<String>,
    webhook_secret: String,
    webhook_url: Mutex<Option<String>>,
    delivery_prefix: String,
    next_delivery: Mutex<u64>,
    http: reqwest::Client,
}

impl ForgeSim {
    pub fn seed(fixture: &Fixture, webhook_secret: impl Into<String>) -> Self {
        Self {
            ledger: Mutex::new(SimLedger::seed(fixture)),
            sent: Mutex::new(HashMap::new()),
            token: None,
            webhook_secret: webhook_secret.into(),
            webhook_url: Mutex::new(None),
            delivery_prefix: "sim".into(),
            next_delivery: Mutex::new(0),
            http: reqwest::Client::new(),
        }
    }

    /// Requires `Authorization: Bearer <token>` on REST calls.
    pub fn require_token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn with_delivery_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.delivery_prefix = prefix.into();
        self
    }

    fn state(&self) -> MutexGuard<'_, SimLedger> {
        self.ledger.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn ledger(&self) -> SimLedger {
        self.state().clone()
    }

    pub fn set_webhook_url(&self, url: impl Into<String>) {
        *self.webhook_url.lock().unwrap_or_else(|p| p.into_inner()) = Some(url.into());
    }

    pub fn push_fault(&self, rule: FaultRule) {
        self.state().fault_script.push(rule);
    }

    pub fn clear_faults(&self) {
        self.state().fault_script.clear();
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.state().requests.clone()
    }

    pub fn clear_requests(&self) {
        self.state().requests.clear();
    }

    pub fn comments(&self) -> Vec<SimComment> {
        self.state().comments.clone()
    }

    pub fn issue_count(&self) -> usize {
        self.state().issues.len()
    }

    pub fn file_count(&self) -> usize {
        self.state().files.len()
    }

    pub fn repo_label(&self, name: &str) -> Option<String> {
        self.state().repo_labels.get(name).cloned()
    }

    /// Adds an issue directly, without a webhook delivery.
    pub fn add_issue(&self, new: &NewIssue) -> WireIssue {
        let mut state = self.state();
        let number = state.issues.keys().next_back().copied().unwrap_or(0) + 1;
        let issue = WireIssue {
            number,
            title: new.title.clone(),
            body: Some(new.body.clone()),
            state: "open".into(),
            html_url: format!("{}/issues/{number}", state.html_base()),
            created_at: new.created_at.unwrap_or_else(Utc::now),
            labels: Vec::new(),
            pull_request: None,
        };
        state.issues.insert(number, issue.clone());
        issue
    }

    /// Changes an issue in place; send an event afterwards to announce it.
    pub fn edit_issue(&self, number: u64, edit: impl FnOnce(&mut WireIssue)) -> Option<WireIssue> {
        let mut state = self.state();
        let issue = state.issues.get_mut(&number)?;
        edit(issue);
        Some(issue.clone())
    }

    pub fn assert_feedback(&self, number: u64) -> FeedbackSnapshot {
        let state = self.state();
        FeedbackSnapshot {
            number,
            comments: state
                .comments
                .iter()
                .filter(|c| c.issue == number)
                .map(|c| c.body.clone())
                .collect(),
            labels: state.labels.get(&number).cloned().unwrap_or_default(),
        }
    }

    fn next_delivery_id(&self) -> String {
        let mut n = self.next_delivery.lock().unwrap_or_else(|p| p.into_inner());
        *n += 1;
        format!("{}-{:06}", self.delivery_prefix, *n)
    }

    /// Opens an issue and delivers the signed `issues`/`opened` event.
    pub async fn emit_issue_opened(&self, new: &NewIssue) -> Result<Emission, SimError> {
        let issue = self.add_issue(new);
        self.emit_issue_event(issue.number, "opened").await
    }

    /// Delivers an `issues` event with the given action for an existing
    /// issue, under a fresh delivery id.
    pub async fn emit_issue_event(&self, number: u64, action: &str) -> Result<Emission, SimError> {
        let (issue, repo) = {
            let state = self.state();
            let issue = state.issues.get(&number).cloned().ok_or(SimError::UnknownIssue(number))?;
            (issue, state.repo())
        };
        let payload = IssuesEvent {
            action: action.to_string(),
            issue,
            repository: repo,
        };
        let body = serde_json::to_vec(&payload).expect("event serializes");
        let delivery_id = self.next_delivery_id();
        self.sent.lock().unwrap_or_else(|p| p.into_inner()).insert(
            delivery_id.clone(),
            SentDelivery {
                event: "issues".into(),
                body: body.clone(),
            },
        );
        let copies = match self.state().take_fault("POST", WEBHOOK_FAULT_PATH, "") {
            Some(FaultBehavior::DeliverDuplicate) => 2,
            _ => 1,
        };
        let mut statuses = Vec::new();
        for _ in 0..copies {
            statuses.push(self.send_delivery(&delivery_id, "issues", &body).await?);
        }
        Ok(Emission {
            number,
            delivery_id,
            statuses,
        })
    }

    /// Sends an earlier delivery again, byte for byte.
    pub async fn redeliver(&self, delivery_id: &str) -> Result<u16, SimError> {
        let (event, body) = {
            let sent = self.sent.lock().unwrap_or_else(|p| p.into_inner());
            let d = sent
                .get(delivery_id)
                .ok_or_else(|| SimError::UnknownDelivery(delivery_id.to_string()))?;
            (d.event.clone(), d.body.clone())
        };
        self.send_delivery(delivery_id, &event, &body).await
    }

    /// Sends a delivery with arbitrary event name and raw bytes.
    pub async fn send_raw(&self, delivery_id: &str, event: &str, body: &[u8]) -> Result<u16, SimError> {
        self.send_delivery(delivery_id, event, body).await
    }

    async fn send_delivery(&self, delivery_id: &str, event: &str, body: &[u8]) -> Result<u16, SimError> {
        let url = self
            .webhook_url
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
            .ok_or(SimError::NoWebhook)?;
        let signature = sign(self.webhook_secret.as_bytes(), body);
        let response = self
            .http
            .post(&url)
            .header(EVENT_HEADER, event)
            .header(DELIVERY_HEADER, delivery_id)
            .header(SIGNATURE_HEADER, signature)
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send()
            .await
            .map_err(|e| SimError::Transport(e.to_string()))?;
        self.state().deliveries_sent.push(delivery_id.to_string());
        Ok(response.status().as_u16())
    }

    pub fn router(self: &Arc<Self>) -> Router {
        let repo_routes = Router::new()
            .route("/repos/{owner}/{repo}", get(get_repo))
            .route("/repos/{owner}/{repo}/issues", get(list_issues))
            .route("/repos/{owner}/{repo}/issues/{number}", get(get_issue))
            .route("/repos/{owner}/{repo}/git/trees/{*sha}", get(get_tree))
            .route("/repos/{owner}/{repo}/labels", post(create_label))
            .route("/repos/{owner}/{repo}/labels/{name}", get(get_label))
            .route("/repos/{owner}/{repo}/issues/{number}/labels", post(add_issue_labels))
            .route(
                "/repos/{owner}/{repo}/issues/{number}/comments",
                get(list_issue_comments).post(create_comment),
            )
            .layer(middleware::from_fn_with_state(self.clone(), faults_and_auth));
        Router::new()
            .merge(repo_routes)
            .route("/_sim/emit", post(control_emit))
            .route("/_sim/ledger", get(control_ledger))
            .route("/_sim/feedback/{number}", get(control_feedback))
            .with_state(self.clone())
    }

    /// Serves on `addr` in a background task.
    pub async fn serve(self: &Arc<Self>, addr: SocketAddr) -> std::io::Result<SimServer> {
        let listener = TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        let router = self.router();
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, router).await;
        });
        Ok(SimServer {
            addr: local,
            task,
        })
    }
}

pub struct SimServer {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl SimServer {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn faults_and_auth(State(sim): State<Arc<ForgeSim>>, request: Request, next: Next) -> Response {
    let method = request.method().to_string();
    let path = request.uri().path().to_string();
    let query = request.uri().query().unwrap_or("").to_string();
    let authorized = match &sim.token {
        None => true,
        Some(token) => request
            .headers()
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v == format!("Bearer {token}")),
    };
    let fault = if authorized {
        sim.state().take_fault(&method, &path, &query)
    } else {
        None
    };
    let response = if !authorized {
        (StatusCode::UNAUTHORIZED, Json(json!({"message": "Bad credentials"}))).into_response()
    } else {
        match fault {
            Some(FaultBehavior::Status429) => (
                StatusCode::TOO_MANY_REQUESTS,
                [("retry-after", "0")],
                Json(json!({"message": "rate limited"})),
            )
                .into_response(),
            Some(FaultBehavior::Status500) => {
                (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({"message": "server error"}))).into_response()
            }
            Some(FaultBehavior::DropConnection) => {
                let chunks: Vec<Result<Bytes, std::io::Error>> = vec![
                    Ok(Bytes::from_static(b"[{\"number\":")),
                    Err(std::io::Error::new(std::io::ErrorKind::ConnectionReset, "dropped")),
                ];
                Response::builder()
                    .status(StatusCode::OK)
                    .header("content-type", "application/json")
                    .body(Body::from_stream(futures::stream::iter(chunks)))
                    .expect("static response")
            }
            Some(FaultBehavior::DeliverDuplicate) | None => next.run(request).await,
        }
    };
    sim.state().requests.push(RequestRecord {
        method,
        path,
        query,
        status: response.status().as_u16(),
        fault,
    });
    response
}

fn not_found() -> Response {
    (StatusCode::NOT_FOUND, Json(json!({"message": "Not Found"}))).into_response()
}

fn same_repo(state: &SimLedger, owner: &str, repo: &str) -> bool {
    state.owner.eq_ignore_ascii_case(owner) && state.name.eq_ignore_ascii_case(repo)
}

fn query_num(q: &HashMap<String, String>, key: &str, default: usize) -> usize {
    q.get(key).and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn paginate<T: Clone>(items: &[T], q: &HashMap<String, String>, default_size: usize) -> Vec<T> {
    let per_page = query_num(q, "per_page", default_size).clamp(1, 100);
    let page = query_num(q, "page", 1).max(1);
    items.iter().skip((page - 1) * per_page).take(per_page).cloned().collect()
}

async fn get_repo(State(sim): State<Arc<ForgeSim>>, Path((owner, repo)): Path<(String, String)>) -> Response {
    let state = sim.state();
    if !same_repo(&state, &owner, &repo) {
        return not_found();
    }
    Json(state.repo()).into_response()
}

async fn list_issues(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let state = sim.state();
    if !same_repo(&state, &owner, &repo) {
        return not_found();
    }
    let wanted = q.get("state").map(String::as_str).unwrap_or("open");
    let mut issues: Vec<WireIssue> = state
        .issues
        .values()
        .filter(|i| wanted == "all" || i.state == wanted)
        .cloned()
        .collect();
    issues.sort_by_key(|i| (i.created_at, i.number));
    if q.get("direction").map(String::as_str) == Some("desc") {
        issues.reverse();
    }
    Json(paginate(&issues, &q, 30)).into_response()
}

async fn get_issue(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo, number)): Path<(String, String, u64)>,
) -> Response {
    let state = sim.state();
    match state.issues.get(&number) {
        Some(issue) if same_repo(&state, &owner, &repo) => Json(issue.clone()).into_response(),
        _ => not_found(),
    }
}

async fn get_tree(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo, sha)): Path<(String, String, String)>,
) -> Response {
    let state = sim.state();
    if !same_repo(&state, &owner, &repo) || sha != state.default_branch {
        return not_found();
    }
    if state.files.is_empty() {
        return (StatusCode::CONFLICT, Json(json!({"message": "Git Repository is empty."}))).into_response();
    }
    let mut dirs = BTreeSet::new();
    for path in &state.files {
        let mut prefix = String::new();
        let parts: Vec<&str> = path.split('/').collect();
        for part in &parts[..parts.len() - 1] {
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(part);
            dirs.insert(prefix.clone());
        }
    }
    let mut tree: Vec<WireTreeEntry> = dirs
        .into_iter()
        .map(|path| WireTreeEntry { path, kind: "tree".into() })
        .chain(state.files.iter().map(|p| WireTreeEntry { path: p.clone(), kind: "blob".into() }))
        .collect();
    tree.sort_by(|a, b| a.path.cmp(&b.path));
    Json(WireTree { tree, truncated: false }).into_response()
}

async fn get_label(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo, name)): Path<(String, String, String)>,
) -> Response {
    let state = sim.state();
    if !same_repo(&state, &owner, &repo) {
        return not_found();
    }
    match state.repo_labels.iter().find(|(n, _)| n.eq_ignore_ascii_case(&name)) {
        Some((name, color)) => Json(WireLabel { name: name.clone(), color: color.clone() }).into_response(),
        None => not_found(),
    }
}

async fn create_label(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo)): Path<(String, String)>,
    Json(label): Json<WireLabel>,
) -> Response {
    let mut state = sim.state();
    if !same_repo(&state, &owner, &repo) {
        return not_found();
    }
    if state.repo_labels.keys().any(|n| n.eq_ignore_ascii_case(&label.name)) {
        return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"message": "already_exists"}))).into_response();
    }
    state.repo_labels.insert(label.name.clone(), label.color.clone());
    (StatusCode::CREATED, Json(label)).into_response()
}

async fn add_issue_labels(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo, number)): Path<(String, String, u64)>,
    Json(request): Json<AddLabels>,
) -> Response {
    let mut state = sim.state();
    if !same_repo(&state, &owner, &repo) || !state.issues.contains_key(&number) {
        return not_found();
    }
    let mut applied = Vec::new();
    for name in request.labels {
        let color = state
            .repo_labels
            .entry(name.clone())
            .or_insert_with(|| "ededed".into())
            .clone();
        state.labels.entry(number).or_default().insert((name.clone(), color.clone()));
        applied.push(WireLabel { name, color });
    }
    Json(applied).into_response()
}

async fn list_issue_comments(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo, number)): Path<(String, String, u64)>,
    Query(q): Query<HashMap<String, String>>,
) -> Response {
    let state = sim.state();
    if !same_repo(&state, &owner, &repo) || !state.issues.contains_key(&number) {
        return not_found();
    }
    let comments: Vec<WireComment> = state
        .comments
        .iter()
        .filter(|c| c.issue == number)
        .map(|c| WireComment { id: c.id, body: c.body.clone() })
        .collect();
    Json(paginate(&comments, &q, 30)).into_response()
}

async fn create_comment(
    State(sim): State<Arc<ForgeSim>>,
    Path((owner, repo, number)): Path<(String, String, u64)>,
    Json(comment): Json<NewComment>,
) -> Response {
    let mut state = sim.state();
    if !same_repo(&state, &owner, &repo) || !state.issues.contains_key(&number) {
        return not_found();
    }
    if comment.body.is_empty() {
        return (StatusCode::UNPROCESSABLE_ENTITY, Json(json!({"message": "body is empty"}))).into_response();
    }
    let id = state.comments.len() as u64 + 1;
    state.comments.push(SimComment {
        id,
        issue: number,
        body: comment.body.clone(),
        received_at: Utc::now(),
    });
    (StatusCode::CREATED, Json(WireComment { id, body: comment.body })).into_response()
}

async fn control_emit(State(sim): State<Arc<ForgeSim>>, Json(new): Json<NewIssue>) -> Response {
    match sim.emit_issue_opened(&new).await {
        Ok(emission) => Json(emission).into_response(),
        Err(e) => (StatusCode::BAD_GATEWAY, Json(json!({"error": e.to_string()}))).into_response(),
    }
}

async fn control_ledger(State(sim): State<Arc<ForgeSim>>) -> Response {
    Json(sim.ledger()).into_response()
}

async fn control_feedback(State(sim): State<Arc<ForgeSim>>, Path(number): Path<u64>) -> Response {
    Json(sim.assert_feedback(number)).into_response()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(issues: usize, files: usize) -> Fixture {
        Fixture {
            issues: (0..issues)
                .map(|i| FixtureIssue {
                    number: None,
                    title: format!("issue {i}"),
                    body: None,
                    state: "open".into(),
                    created_at: None,
                    labels: vec![],
                    pull_request: false,
                })
                .collect(),
            files: (0..files).map(|i| format!("src/f{i}.rs")).collect(),
            ..Fixture::default()
        }
    }

    #[test]
    fn seeding_counts_and_determinism() {
        let f = fixture(20, 50);
        let a = SimLedger::seed(&f);
        assert_eq!((a.issues.len(), a.files.len()), (20, 50));
        assert_eq!(a, SimLedger::seed(&f));
        let empty = SimLedger::seed(&Fixture::default());
        assert!(empty.issues.is_empty() && empty.files.is_empty() && empty.comments.is_empty());
    }

    #[test]
    fn fault_rules_count_down() {
        let mut ledger = SimLedger::seed(&Fixture::default());
        ledger.fault_script.push(
            FaultRule::new(Some("GET"), "/repos/*", FaultBehavior::Status429, 2).with_query("page=2"),
        );
        assert_eq!(ledger.take_fault("GET", "/repos/o/r/issues", "page=1"), None);
        assert_eq!(ledger.take_fault("POST", "/repos/o/r/issues", "page=2"), None);
        assert_eq!(ledger.take_fault("GET", "/repos/o/r/issues", "page=2"), Some(FaultBehavior::Status429));
        assert_eq!(ledger.take_fault("GET", "/repos/o/r/issues", "page=2"), Some(FaultBehavior::Status429));
        assert_eq!(ledger.take_fault("GET", "/repos/o/r/issues", "page=2"), None);
    }

    #[test]
    fn fault_script_json() {
        let rules: Vec<FaultRule> = serde_json::from_str(
            r#"[{"match": {"method": "POST", "path": "/repos/octo/widgets/issues/21/comments"}, "behavior": "status-429"},
                {"match": {"path": "/webhook"}, "behavior": "deliver-duplicate", "times": 3}]"#,
        )
        .unwrap();
        assert_eq!(rules[0].times, 1);
        assert_eq!(rules[1].behavior, FaultBehavior::DeliverDuplicate);
        assert_eq!(rules[1].times, 3);
    }
}
