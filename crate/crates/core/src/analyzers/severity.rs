use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{IssueText, DEFAULT_TITLE_REPEAT};
use crate::model::SeverityClass;
use crate::plugin::{AnalysisOutcome, AnalysisRequest, Analyzer, AnalyzerError};
use crate::text::{cosine, tfidf_vector, tokenize, Corpus, TermVector, TokenStream};

/// Labeled seed data shipped with the crate so the service has a usable
/// model before an operator retrains it.
pub const SEED_TRAINING_SET: &str = include_str!("../../data/severity_seed.jsonl");

/// One labeled training or evaluation record (a JSON-lines row).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeverityExample {
    pub title: String,
    #[serde(default, deserialize_with = "null_as_empty")]
    pub body: String,
    pub severity: SeverityClass,
}

fn null_as_empty<'de, D: serde::Deserializer<'de>>(d: D) -> Result<String, D::Error> {
    Ok(Option::<String>::deserialize(d)?.unwrap_or_default())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrainingError {
    #[error("no training examples for class {0}")]
    MissingClass(SeverityClass),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Parses JSON-lines training data. Blank lines are skipped; line numbers
/// in errors are 1-based.
pub fn parse_training_jsonl(input: &str) -> Result<Vec<SeverityExample>, TrainingError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let example: SeverityExample =
            serde_json::from_str(line).map_err(|e| TrainingError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(example);
    }
    Ok(out)
}

/// Nearest-centroid severity classifier over TF-IDF vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityModel {
    pub class_centroids: BTreeMap<SeverityClass, TermVector>,
    pub training_corpus: Corpus,
    pub trained_on: BTreeMap<SeverityClass, usize>,
    pub title_repeat: usize,
}

impl SeverityModel {
    /// Model trained on [`SEED_TRAINING_SET`].
    pub fn seed() -> Self {
        let examples = parse_training_jsonl(SEED_TRAINING_SET).expect("seed set parses");
        train_severity(&examples, DEFAULT_TITLE_REPEAT).expect("seed set covers every class")
    }

    pub fn vectorize(&self, text: IssueText<'_>) -> TermVector {
        let tokens = tokenize(&text.render(self.title_repeat));
        if tokens.is_empty() || self.training_corpus.doc_count() == 0 {
            return TermVector::default();
        }
        tfidf_vector(&tokens, &self.training_corpus).unwrap_or_default()
    }

    /// Cosine to each centroid, most severe class first.
    pub fn similarities(&self, vector: &TermVector) -> [(SeverityClass, f64); 5] {
        SeverityClass::ALL.map(|class| {
            let sim = self
                .class_centroids
                .get(&class)
                .map_or(0.0, |c| cosine(vector, c));
            (class, sim)
        })
    }
}

fn training_tokens(examples: &[SeverityExample], title_repeat: usize) -> Vec<TokenStream> {
    examples
        .iter()
        .map(|e| tokenize(&IssueText::new(&e.title, &e.body).render(title_repeat)))
        .collect()
}

/// Builds the corpus from the examples themselves and averages each class.
pub fn train_severity(
    examples: &[SeverityExample],
    title_repeat: usize,
) -> Result<SeverityModel, TrainingError> {
    let tokens = training_tokens(examples, title_repeat);
    let corpus = Corpus::build(&tokens);
    centroids(examples, &tokens, corpus, title_repeat)
}

/// Like [`train_severity`] but weights terms against a caller-supplied corpus.
pub fn train_severity_with_corpus(
    examples: &[SeverityExample],
    corpus: Corpus,
    title_repeat: usize,
) -> Result<SeverityModel, TrainingError> {
    let tokens = training_tokens(examples, title_repeat);
    centroids(examples, &tokens, corpus, title_repeat)
}

fn centroids(
    examples: &[SeverityExample],
    tokens: &[TokenStream],
    corpus: Corpus,
    title_repeat: usize,
) -> Result<SeverityModel, TrainingError> {
    let mut by_class: BTreeMap<SeverityClass, Vec<TermVector>> = BTreeMap::new();
    for (example, doc) in examples.iter().zip(tokens) {
        let v = if corpus.doc_count() == 0 {
            TermVector::default()
        } else {
            tfidf_vector(doc, &corpus).unwrap_or_default()
        };
        by_class.entry(example.severity).or_default().push(v);
    }
    for class in SeverityClass::ALL {
        if !by_class.contains_key(&class) {
            return Err(TrainingError::MissingClass(class));
        }
    }
    Ok(SeverityModel {
        trained_on: by_class.iter().map(|(c, v)| (*c, v.len())).collect(),
        class_centroids: by_class
            .iter()
            .map(|(c, v)| (*c, TermVector::mean(v)))
            .collect(),
        training_corpus: corpus,
        title_repeat,
    })
}

/// Nearest centroid by cosine. Ties go to the more severe class. Text with
/// no tokens, or with no similarity to any class, is `(Major, 0.0)`.
pub fn predict_severity(model: &SeverityModel, text: IssueText<'_>) -> (SeverityClass, f64) {
    let vector = model.vectorize(text);
    if vector.is_zero() {
        return (SeverityClass::Major, 0.0);
    }
    let mut best = (SeverityClass::Major, 0.0);
    for (class, sim) in model.similarities(&vector) {
        if sim > best.1 {
            best = (class, sim);
        }
    }
    best
}

pub struct SeverityAnalyzer {
    model: Arc<SeverityModel>,
}

impl SeverityAnalyzer {
    pub fn new(model: Arc<SeverityModel>) -> Self {
        Self { model }
    }
}

impl Analyzer for SeverityAnalyzer {
    fn analyze(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError> {
        let (class, confidence) = predict_severity(&self.model, IssueText::from(&request.issue));
        Ok(AnalysisOutcome::Severity { class, confidence })
    }
}
