//! Offline evaluation: JSON-lines datasets for the three tasks and the
//! classification and ranking metrics reported for them.
//!
//! Per-example values are summed in ascending order, so every metric is
//! bit-identical under any permutation of the dataset.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzers::{
    localize_bugs, predict_severity, IssueText, LocalizationConfig, SeverityModel,
};
use crate::model::SeverityClass;
use crate::text::{cosine, tfidf_vector, tokenize, Corpus};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown severity class `{value}`")]
    UnknownClass { line: usize, value: String },
    #[error("line {line}: ground-truth file `{path}` is not among file_paths")]
    GroundTruthNotListed { line: usize, path: String },
    #[error("line {line}: ground_truth is empty")]
    EmptyGroundTruth { line: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid k list: {0}")]
    InvalidK(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub title: String,
    #[serde(default)]
    pub body: Option<String>,
}

impl TextPair {
    pub fn text(&self) -> IssueText<'_> {
        IssueText::new(&self.title, self.body.as_deref().unwrap_or(""))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicatePairExample {
    pub issue_a: TextPair,
    pub issue_b: TextPair,
    pub is_duplicate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityEvalExample {
    pub title: String,
    #[serde(default)]
    pub body: Option<String>,
    pub severity: SeverityClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationExample {
    pub issue: TextPair,
    pub file_paths: Vec<String>,
    pub ground_truth: Vec<String>,
}

fn parse_lines<T: DeserializeOwned>(
    input: &str,
    mut check: impl FnMut(usize, &serde_json::Value) -> Result<(), EvalError>,
) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| EvalError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        check(line_no, &value)?;
        out.push(
            serde_json::from_value(value).map_err(|e| EvalError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn parse_duplicate_pairs(input: &str) -> Result<Vec<DuplicatePairExample>, EvalError> {
    parse_lines(input, |_, _| Ok(()))
}

pub fn parse_severity_examples(input: &str) -> Result<Vec<SeverityEvalExample>, EvalError> {
    parse_lines(input, |line, value| match value.get("severity") {
        Some(serde_json::Value::String(s)) if s.parse::<SeverityClass>().is_err() => {
            Err(EvalError::UnknownClass {
                line,
                value: s.clone(),
            })
        }
        _ => Ok(()),
    })
}

pub fn parse_localization_examples(input: &str) -> Result<Vec<LocalizationExample>, EvalError> {
    let examples: Vec<LocalizationExample> = parse_lines(input, |_, _| Ok(()))?;
    // Line numbers count non-blank lines only when the input has blanks; map
    // back to physical lines for the error.
    let lines: Vec<usize> = input
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (example, line) in examples.iter().zip(lines) {
        validate_localization(example, line)?;
    }
    Ok(examples)
}

fn validate_localization(example: &LocalizationExample, line: usize) -> Result<(), EvalError> {
    if example.ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth { line });
    }
    let files: HashSet<&str> = example.file_paths.iter().map(String::as_str).collect();
    for path in &example.ground_truth {
        if !files.contains(path.as_str()) {
            return Err(EvalError::GroundTruthNotListed {
                line,
                path: path.clone(),
            });
        }
    }
    Ok(())
}

/// Metrics of one evaluation run. Fields that do not apply to a task are
/// `None` (classification tasks have no ranking metrics and vice versa).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetricsReport {
    pub task: String,
    pub n_examples: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    #[serde(rename = "p_at_k")]
    pub precision_at_k: BTreeMap<usize, f64>,
    #[serde(rename = "r_at_k")]
    pub recall_at_k: BTreeMap<usize, f64>,
    #[serde(rename = "map")]
    pub map_score: Option<f64>,
    /// Conventions that were applied, e.g. zero denominators.
    pub flags: Vec<String>,
}

impl RankingMetricsReport {
    fn new(task: &str, n_examples: usize) -> Self {
        Self {
            task: task.to_string(),
            n_examples,
            accuracy: 0.0,
            precision: None,
            recall: None,
            precision_at_k: BTreeMap::new(),
            recall_at_k: BTreeMap::new(),
            map_score: None,
            flags: Vec::new(),
        }
    }
}

/// Order-independent mean: values are sorted before summation.
pub fn stable_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

// -- binary classification ------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// TP / (TP + FP). With nothing predicted positive: 1.0 when there were
    /// no positives to find, otherwise 0.0. The flag reports the fallback.
    pub fn precision(&self) -> (f64, Option<&'static str>) {
        if self.tp + self.fp == 0 {
            let v = if self.tp + self.fn_ == 0 { 1.0 } else { 0.0 };
            return (v, Some("precision_zero_denominator"));
        }
        (self.tp as f64 / (self.tp + self.fp) as f64, None)
    }

    /// TP / (TP + FN), 1.0 when there were no positives.
    pub fn recall(&self) -> (f64, Option<&'static str>) {
        if self.tp + self.fn_ == 0 {
            return (1.0, Some("recall_zero_denominator"));
        }
        (self.tp as f64 / (self.tp + self.fn_) as f64, None)
    }
}

/// Pair similarity for duplicate evaluation; the corpus spans both sides of
/// every pair in the dataset.
pub fn duplicate_pair_scores(examples: &[DuplicatePairExample], title_repeat: usize) -> Vec<f64> {
    if examples.is_empty() {
        return Vec::new();
    }
    let tokens: Vec<_> = examples
        .iter()
        .map(|e| {
            (
                tokenize(&e.issue_a.text().render(title_repeat)),
                tokenize(&e.issue_b.text().render(title_repeat)),
            )
        })
        .collect();
    let corpus = Corpus::build(tokens.iter().flat_map(|(a, b)| [a, b]));
    tokens
        .iter()
        .map(|(a, b)| {
            let va = tfidf_vector(a, &corpus).expect("non-empty corpus");
            let vb = tfidf_vector(b, &corpus).expect("non-empty corpus");
            cosine(&va, &vb)
        })
        .collect()
}

pub fn eval_duplicates(
    examples: &[DuplicatePairExample],
    threshold: f64,
    title_repeat: usize,
) -> Result<RankingMetricsReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let scores = duplicate_pair_scores(examples, title_repeat);
    let mut confusion = Confusion::default();
    for (example, score) in examples.iter().zip(scores) {
        match (score >= threshold, example.is_duplicate) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, true) => confusion.fn_ += 1,
            (false, false) => confusion.tn += 1,
        }
    }
    Ok(binary_report("duplicates", confusion))
}

pub fn binary_report(task: &str, confusion: Confusion) -> RankingMetricsReport {
    let mut report = RankingMetricsReport::new(task, confusion.total());
    report.accuracy = confusion.accuracy();
    let (p, pf) = confusion.precision();
    let (r, rf) = confusion.recall();
    report.precision = Some(p);
    report.recall = Some(r);
    report.flags.extend(pf.into_iter().chain(rf).map(String::from));
    report
}

// -- multiclass -------------------------------------------------------------

/// Accuracy plus macro precision and recall over every class that occurs in
/// the truth or the predictions. Classes with a zero denominator contribute
/// 0.0 and are flagged.
pub fn multiclass_report<C: Ord + Copy + std::fmt::Display>(
    task: &str,
    pairs: &[(C, C)],
) -> RankingMetricsReport {
    let mut report = RankingMetricsReport::new(task, pairs.len());
    if pairs.is_empty() {
        return report;
    }
    let classes: BTreeSet<C> = pairs.iter().flat_map(|(t, p)| [*t, *p]).collect();
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    report.accuracy = correct as f64 / pairs.len() as f64;

    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for class in &classes {
        let tp = pairs.iter().filter(|(t, p)| t == class && p == class).count();
        let predicted = pairs.iter().filter(|(_, p)| p == class).count();
        let actual = pairs.iter().filter(|(t, _)| t == class).count();
        if predicted == 0 {
            precisions.push(0.0);
            report.flags.push(format!("precision_zero_denominator:{class}"));
        } else {
            precisions.push(tp as f64 / predicted as f64);
        }
        if actual == 0 {
            recalls.push(0.0);
            report.flags.push(format!("recall_zero_denominator:{class}"));
        } else {
            recalls.push(tp as f64 / actual as f64);
        }
    }
    report.precision = Some(stable_mean(&precisions));
    report.recall = Some(stable_mean(&recalls));
    report
}

pub fn eval_severity(
    examples: &[SeverityEvalExample],
    model: &SeverityModel,
) -> Result<RankingMetricsReport, EvalError> {
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let pairs: Vec<(SeverityClass, SeverityClass)> = examples
        .iter()
        .map(|e| {
            let text = IssueText::new(&e.title, e.body.as_deref().unwrap_or(""));
            (e.severity, predict_severity(model, text).0)
        })
        .collect();
    Ok(multiclass_report("severity", &pairs))
}

// -- ranking ----------------------------------------------------------------

fn hits_in_top_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> usize {
    ranked.iter().take(k).filter(|r| relevant.contains(r)).count()
}

/// |relevant ∩ top-k| / k.
pub fn precision_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    hits_in_top_k(ranked, relevant, k) as f64 / k as f64
}

/// |relevant ∩ top-k| / |relevant|.
pub fn recall_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits_in_top_k(ranked, relevant, k) as f64 / relevant.len() as f64
}

pub fn hit_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> bool {
    hits_in_top_k(ranked, relevant, k) > 0
}

/// Mean of precision@rank over the ranks holding relevant items, divided by
/// the number of relevant items (unretrieved ones contribute zero).
pub fn average_precision<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    let mut seen = HashSet::new();
    for (i, item) in ranked.iter().enumerate() {
        if relevant.contains(item) && seen.insert(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

fn check_ks(ks: &[usize]) -> Result<usize, EvalError> {
    if ks.is_empty() {
        return Err(EvalError::InvalidK("no k given".into()));
    }
    if ks.contains(&0) {
        return Err(EvalError::InvalidK("k must be at least 1".into()));
    }
    Ok(*ks.iter().max().expect("non-empty"))
}

/// Evaluates a ranker over localization examples. Accuracy is hit@k for the
/// largest k requested.
pub fn eval_localization<F>(
    examples: &[LocalizationExample],
    ranker: F,
    ks: &[usize],
) -> Result<RankingMetricsReport, EvalError>
where
    F: Fn(&LocalizationExample) -> Vec<String>,
{
    if examples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let k_max = check_ks(ks)?;
    for (i, example) in examples.iter().enumerate() {
        validate_localization(example, i + 1)?;
    }
    let ks: BTreeSet<usize> = ks.iter().copied().collect();

    let mut hits = Vec::with_capacity(examples.len());
    let mut aps = Vec::with_capacity(examples.len());
    let mut p_at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut r_at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for example in examples {
        let ranked = ranker(example);
        let relevant: HashSet<String> = example.ground_truth.iter().cloned().collect();
        hits.push(if hit_at_k(&ranked, &relevant, k_max) { 1.0 } else { 0.0 });
        aps.push(average_precision(&ranked, &relevant));
        for &k in &ks {
            p_at.entry(k).or_default().push(precision_at_k(&ranked, &relevant, k));
            r_at.entry(k).or_default().push(recall_at_k(&ranked, &relevant, k));
        }
    }

    let mut report = RankingMetricsReport::new("localization", examples.len());
    report.accuracy = stable_mean(&hits);
    report.map_score = Some(stable_mean(&aps));
    report.precision_at_k = p_at.iter().map(|(k, v)| (*k, stable_mean(v))).collect();
    report.recall_at_k = r_at.iter().map(|(k, v)| (*k, stable_mean(v))).collect();
    report.flags.push(format!("accuracy_is_hit_at_{k_max}"));
    Ok(report)
}

/// Full ranking from the reference lexical localizer.
pub fn reference_localization_ranker(
    title_repeat: usize,
) -> impl Fn(&LocalizationExample) -> Vec<String> {
    move |example| {
        let paths: Vec<&str> = example.file_paths.iter().map(String::as_str).collect();
        let cfg = LocalizationConfig {
            top_k: paths.len().max(1),
            title_repeat,
        };
        localize_bugs(example.issue.text(), &paths, &cfg)
            .into_iter()
            .map(|s| s.path)
            .collect()
    }
}
