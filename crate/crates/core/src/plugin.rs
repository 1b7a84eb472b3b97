//! Analyzer plugin host.
//!
//! Analyzers are registered at runtime under a stable id and selected per
//! kind by configuration. The host runs each analysis on its own thread with
//! a deadline, turns errors, panics, overruns and malformed outcomes into a
//! [`FailureRecord`], and keeps the three kinds independent of one another.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CodeFileRef, IssueRecord, SeverityClass};

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(60);

/// Upper bound accepted for similarity scores, leaving room for rounding.
const SCORE_CEILING: f64 = 1.0 + 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalyzerKind {
    Duplicate,
    Severity,
    Localization,
}

impl AnalyzerKind {
    pub const ALL: [AnalyzerKind; 3] = [
        AnalyzerKind::Duplicate,
        AnalyzerKind::Severity,
        AnalyzerKind::Localization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AnalyzerKind::Duplicate => "duplicate",
            AnalyzerKind::Severity => "severity",
            AnalyzerKind::Localization => "localization",
        }
    }
}

impl fmt::Display for AnalyzerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerDescriptor {
    pub id: String,
    pub kind: AnalyzerKind,
    pub display_name: String,
    pub deterministic: bool,
    /// Opaque per-analyzer settings taken from the configuration file.
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl AnalyzerDescriptor {
    pub fn new(id: impl Into<String>, kind: AnalyzerKind, display_name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind,
            display_name: display_name.into(),
            deterministic: true,
            config: BTreeMap::new(),
        }
    }

    pub fn nondeterministic(mut self) -> Self {
        self.deterministic = false;
        self
    }

    pub fn with_config(mut self, config: BTreeMap<String, String>) -> Self {
        self.config = config;
        self
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisRequest {
    pub kind: AnalyzerKind,
    pub issue: IssueRecord,
    /// Other issues of the repository; used by duplicate analyzers only.
    pub candidates: Vec<IssueRecord>,
    /// Latest file snapshot; used by localization analyzers only.
    pub files: Vec<CodeFileRef>,
    pub deadline: Duration,
}

impl AnalysisRequest {
    pub fn duplicate(issue: IssueRecord, candidates: Vec<IssueRecord>) -> Self {
        Self {
            kind: AnalyzerKind::Duplicate,
            issue,
            candidates,
            files: Vec::new(),
            deadline: DEFAULT_DEADLINE,
        }
    }

    pub fn severity(issue: IssueRecord) -> Self {
        Self {
            kind: AnalyzerKind::Severity,
            issue,
            candidates: Vec::new(),
            files: Vec::new(),
            deadline: DEFAULT_DEADLINE,
        }
    }

    pub fn localization(issue: IssueRecord, files: Vec<CodeFileRef>) -> Self {
        Self {
            kind: AnalyzerKind::Localization,
            issue,
            candidates: Vec::new(),
            files,
            deadline: DEFAULT_DEADLINE,
        }
    }

    pub fn with_deadline(mut self, deadline: Duration) -> Self {
        self.deadline = deadline;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredIssue {
    pub number: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPath {
    pub path: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnalysisOutcome {
    /// Sorted by score descending, ties by ascending issue number.
    Duplicate(Vec<ScoredIssue>),
    Severity {
        class: SeverityClass,
        confidence: f64,
    },
    /// Sorted by score descending, ties by ascending path.
    Localization(Vec<ScoredPath>),
}

impl AnalysisOutcome {
    pub fn kind(&self) -> AnalyzerKind {
        match self {
            AnalysisOutcome::Duplicate(_) => AnalyzerKind::Duplicate,
            AnalysisOutcome::Severity { .. } => AnalyzerKind::Severity,
            AnalysisOutcome::Localization(_) => AnalyzerKind::Localization,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct AnalyzerError(pub String);

impl AnalyzerError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// An issue-management analysis plugged into the host.
pub trait Analyzer: Send + Sync {
    fn analyze(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError>;

    /// Analyzers returning false are serialized by the host.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

impl<F> Analyzer for F
where
    F: Fn(&AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError> + Send + Sync,
{
    fn analyze(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "detail", rename_all = "snake_case")]
pub enum FailureReason {
    NotConfigured,
    Failed(String),
    Panicked(String),
    DeadlineExceeded(Duration),
    InvalidOutcome(String),
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::NotConfigured => f.write_str("no enabled analyzer"),
            FailureReason::Failed(e) => write!(f, "analyzer error: {e}"),
            FailureReason::Panicked(e) => write!(f, "analyzer panicked: {e}"),
            FailureReason::DeadlineExceeded(d) => write!(f, "deadline of {d:?} exceeded"),
            FailureReason::InvalidOutcome(e) => write!(f, "invalid outcome: {e}"),
        }
    }
}

/// The captured failure of one dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub kind: AnalyzerKind,
    pub analyzer_id: Option<String>,
    pub reason: FailureReason,
}

impl fmt::Display for FailureRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.analyzer_id {
            Some(id) => write!(f, "{} analyzer `{id}`: {}", self.kind, self.reason),
            None => write!(f, "{} analysis: {}", self.kind, self.reason),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("analyzer id `{0}` is already registered")]
    DuplicateId(String),
    #[error("analyzer `{id}` is a {actual} analyzer, not {expected}")]
    KindMismatch {
        id: String,
        expected: AnalyzerKind,
        actual: AnalyzerKind,
    },
}

struct Registered {
    descriptor: AnalyzerDescriptor,
    analyzer: Arc<dyn Analyzer>,
    serial: Option<Arc<Mutex<()>>>,
}

/// Results of the three independent analyses for one issue.
#[derive(Debug, Clone)]
pub struct AnalysisResults {
    pub duplicate: Result<AnalysisOutcome, FailureRecord>,
    pub severity: Result<AnalysisOutcome, FailureRecord>,
    pub localization: Result<AnalysisOutcome, FailureRecord>,
}

impl AnalysisResults {
    pub fn failures(&self) -> impl Iterator<Item = &FailureRecord> {
        [&self.duplicate, &self.severity, &self.localization]
            .into_iter()
            .filter_map(|r| r.as_ref().err())
    }
}

/// A selected analyzer and, for non-reentrant ones, the lock serializing its calls.
type Resolved = (AnalyzerDescriptor, Arc<dyn Analyzer>, Option<Arc<Mutex<()>>>);

#[derive(Default)]
pub struct PluginHost {
    analyzers: RwLock<HashMap<String, Registered>>,
    selection: RwLock<BTreeMap<AnalyzerKind, String>>,
}

impl PluginHost {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &self,
        descriptor: AnalyzerDescriptor,
        analyzer: Arc<dyn Analyzer>,
    ) -> Result<(), RegistrationError> {
        let mut analyzers = self.analyzers.write().unwrap_or_else(|p| p.into_inner());
        if analyzers.contains_key(&descriptor.id) {
            return Err(RegistrationError::DuplicateId(descriptor.id));
        }
        let serial = (!analyzer.concurrent_safe()).then(|| Arc::new(Mutex::new(())));
        analyzers.insert(
            descriptor.id.clone(),
            Registered {
                descriptor,
                analyzer,
                serial,
            },
        );
        Ok(())
    }

    /// Enables `id` for `kind`. The id may be registered later; dispatch
    /// resolves it at call time.
    pub fn select(&self, kind: AnalyzerKind, id: impl Into<String>) -> Result<(), RegistrationError> {
        let id = id.into();
        if let Some(reg) = self.analyzers.read().unwrap_or_else(|p| p.into_inner()).get(&id) {
            if reg.descriptor.kind != kind {
                return Err(RegistrationError::KindMismatch {
                    id,
                    expected: kind,
                    actual: reg.descriptor.kind,
                });
            }
        }
        self.selection
            .write()
            .unwrap_or_else(|p| p.into_inner())
            .insert(kind, id);
        Ok(())
    }

    pub fn descriptors(&self) -> Vec<AnalyzerDescriptor> {
        let analyzers = self.analyzers.read().unwrap_or_else(|p| p.into_inner());
        let mut out: Vec<_> = analyzers.values().map(|r| r.descriptor.clone()).collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// The enabled analyzer for `kind`: the selected id, or the only
    /// registered analyzer of that kind when nothing is selected.
    pub fn enabled(&self, kind: AnalyzerKind) -> Option<AnalyzerDescriptor> {
        self.resolve(kind).map(|(d, _, _)| d)
    }

    fn resolve(&self, kind: AnalyzerKind) -> Option<Resolved> {
        let analyzers = self.analyzers.read().unwrap_or_else(|p| p.into_inner());
        let selected = self
            .selection
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .get(&kind)
            .cloned();
        let reg = match selected {
            Some(id) => analyzers.get(&id).filter(|r| r.descriptor.kind == kind)?,
            None => {
                let mut of_kind = analyzers.values().filter(|r| r.descriptor.kind == kind);
                let only = of_kind.next()?;
                if of_kind.next().is_some() {
                    return None;
                }
                only
            }
        };
        Some((reg.descriptor.clone(), reg.analyzer.clone(), reg.serial.clone()))
    }

    /// Runs the enabled analyzer for the request's kind.
    pub fn dispatch(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, FailureRecord> {
        let kind = request.kind;
        let Some((descriptor, analyzer, serial)) = self.resolve(kind) else {
            return Err(FailureRecord {
                kind,
                analyzer_id: None,
                reason: FailureReason::NotConfigured,
            });
        };
        let fail = |reason| FailureRecord {
            kind,
            analyzer_id: Some(descriptor.id.clone()),
            reason,
        };

        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(request.clone());
        let spawned = thread::Builder::new()
            .name(format!("analyzer-{}", descriptor.id))
            .spawn(move || {
                let _guard = serial.as_ref().map(|m| m.lock().unwrap_or_else(|p| p.into_inner()));
                let result = catch_unwind(AssertUnwindSafe(|| analyzer.analyze(&shared)));
                let _ = tx.send(result);
            });
        if let Err(e) = spawned {
            return Err(fail(FailureReason::Failed(format!("could not start analyzer: {e}"))));
        }

        let outcome = match rx.recv_timeout(request.deadline) {
            Ok(Ok(Ok(outcome))) => outcome,
            Ok(Ok(Err(e))) => return Err(fail(FailureReason::Failed(e.0))),
            Ok(Err(panic)) => return Err(fail(FailureReason::Panicked(panic_message(&*panic)))),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return Err(fail(FailureReason::DeadlineExceeded(request.deadline)))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return Err(fail(FailureReason::Panicked("analyzer thread vanished".into())))
            }
        };
        validate_outcome(request, &outcome).map_err(|e| fail(FailureReason::InvalidOutcome(e)))?;
        Ok(outcome)
    }

    /// Runs the three kinds concurrently. A failure of one kind never
    /// affects the others.
    pub fn run_all(
        &self,
        issue: &IssueRecord,
        candidates: Vec<IssueRecord>,
        files: Vec<CodeFileRef>,
        deadline: Duration,
    ) -> AnalysisResults {
        let duplicate = AnalysisRequest::duplicate(issue.clone(), candidates).with_deadline(deadline);
        let severity = AnalysisRequest::severity(issue.clone()).with_deadline(deadline);
        let localization = AnalysisRequest::localization(issue.clone(), files).with_deadline(deadline);
        thread::scope(|s| {
            let d = s.spawn(|| self.dispatch(&duplicate));
            let v = s.spawn(|| self.dispatch(&severity));
            let l = self.dispatch(&localization);
            let join = |h: thread::ScopedJoinHandle<'_, _>, kind| {
                h.join().unwrap_or_else(|_| {
                    Err(FailureRecord {
                        kind,
                        analyzer_id: None,
                        reason: FailureReason::Panicked("dispatch thread panicked".into()),
                    })
                })
            };
            AnalysisResults {
                duplicate: join(d, AnalyzerKind::Duplicate),
                severity: join(v, AnalyzerKind::Severity),
                localization: l,
            }
        })
    }
}

fn panic_message(panic: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

fn check_score(score: f64, what: &str) -> Result<(), String> {
    if !score.is_finite() || !(0.0..=SCORE_CEILING).contains(&score) {
        return Err(format!("{what} score {score} outside [0, 1]"));
    }
    Ok(())
}

/// Checks kind, ranges, membership and ordering of an outcome.
pub fn validate_outcome(request: &AnalysisRequest, outcome: &AnalysisOutcome) -> Result<(), String> {
    if outcome.kind() != request.kind {
        return Err(format!(
            "expected a {} outcome, got {}",
            request.kind,
            outcome.kind()
        ));
    }
    match outcome {
        AnalysisOutcome::Duplicate(list) => {
            let known: HashSet<u64> = request.candidates.iter().map(|c| c.number).collect();
            let mut seen = HashSet::new();
            for s in list {
                check_score(s.score, &format!("issue #{}", s.number))?;
                if s.number == request.issue.number || !known.contains(&s.number) {
                    return Err(format!("issue #{} is not a candidate", s.number));
                }
                if !seen.insert(s.number) {
                    return Err(format!("issue #{} listed twice", s.number));
                }
            }
            for w in list.windows(2) {
                let ordered = w[0].score > w[1].score
                    || (w[0].score == w[1].score && w[0].number < w[1].number);
                if !ordered {
                    return Err(format!(
                        "duplicates not sorted at #{} / #{}",
                        w[0].number, w[1].number
                    ));
                }
            }
        }
        AnalysisOutcome::Severity { confidence, .. } => check_score(*confidence, "confidence")?,
        AnalysisOutcome::Localization(list) => {
            let known: HashSet<&str> = request.files.iter().map(|f| f.path.as_str()).collect();
            let mut seen = HashSet::new();
            for s in list {
                if !s.score.is_finite() || s.score < 0.0 {
                    return Err(format!("path `{}` has score {}", s.path, s.score));
                }
                if !known.contains(s.path.as_str()) {
                    return Err(format!("path `{}` is not in the snapshot", s.path));
                }
                if !seen.insert(s.path.as_str()) {
                    return Err(format!("path `{}` listed twice", s.path));
                }
            }
            for w in list.windows(2) {
                let ordered =
                    w[0].score > w[1].score || (w[0].score == w[1].score && w[0].path < w[1].path);
                if !ordered {
                    return Err(format!(
                        "localization not sorted at `{}` / `{}`",
                        w[0].path, w[1].path
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Runs a localization analyzer several times and keeps only the paths
/// suggested by every run, ordered by mean score.
pub struct ConsensusLocalizer {
    inner: Arc<dyn Analyzer>,
    runs: usize,
}

impl ConsensusLocalizer {
    pub fn new(inner: Arc<dyn Analyzer>, runs: usize) -> Result<Self, AnalyzerError> {
        if runs == 0 {
            return Err(AnalyzerError::new("consensus needs at least one run"));
        }
        Ok(Self { inner, runs })
    }

    pub fn runs(&self) -> usize {
        self.runs
    }
}

impl Analyzer for ConsensusLocalizer {
    fn analyze(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError> {
        if self.runs == 1 {
            return self.inner.analyze(request);
        }
        let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in 0..self.runs {
            let list = match self.inner.analyze(request)? {
                AnalysisOutcome::Localization(list) => list,
                other => {
                    return Err(AnalyzerError::new(format!(
                        "consensus run {} returned a {} outcome",
                        run + 1,
                        other.kind()
                    )))
                }
            };
            for s in list {
                let entry = scores.entry(s.path).or_default();
                // A path listed twice in one run counts once.
                if entry.len() == run {
                    entry.push(s.score);
                }
            }
            scores.retain(|_, v| v.len() == run + 1);
        }
        let mut merged: Vec<ScoredPath> = scores
            .into_iter()
            .map(|(path, v)| {
                let score = if v.iter().all(|s| s.to_bits() == v[0].to_bits()) {
                    v[0]
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                };
                ScoredPath { path, score }
            })
            .collect();
        merged.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
        Ok(AnalysisOutcome::Localization(merged))
    }

    fn concurrent_safe(&self) -> bool {
        self.inner.concurrent_safe()
    }
}
