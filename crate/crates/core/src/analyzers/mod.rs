//! Reference analyzers for the three issue-management features.
//!
//! All three work on TF-IDF vectors from [`crate::text`]: duplicates by
//! pairwise cosine, severity by nearest centroid, localization by comparing
//! the issue text with tokenized file paths.

use std::collections::BTreeMap;
use std::str::FromStr;

use thiserror::Error;

use crate::model::IssueRecord;

mod duplicate;
mod localization;
mod severity;

pub use duplicate::{detect_duplicates, DuplicateAnalyzer, DuplicateConfig};
pub use localization::{localize_bugs, LocalizationAnalyzer, LocalizationConfig};
pub use severity::{
    parse_training_jsonl, predict_severity, train_severity, train_severity_with_corpus,
    SeverityAnalyzer, SeverityExample, SeverityModel, TrainingError, SEED_TRAINING_SET,
};

pub const DUPLICATE_ANALYZER_ID: &str = "tfidf-duplicate";
pub const SEVERITY_ANALYZER_ID: &str = "centroid-severity";
pub const LOCALIZATION_ANALYZER_ID: &str = "tfidf-localization";

/// How many times the title is repeated ahead of the body.
pub const DEFAULT_TITLE_REPEAT: usize = 2;

/// Title and body of an issue, borrowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IssueText<'a> {
    pub title: &'a str,
    pub body: &'a str,
}

impl<'a> IssueText<'a> {
    pub fn new(title: &'a str, body: &'a str) -> Self {
        Self { title, body }
    }

    /// The title `title_repeat` times, then the body, space separated.
    pub fn render(&self, title_repeat: usize) -> String {
        let mut parts: Vec<&str> = std::iter::repeat_n(self.title, title_repeat).collect();
        parts.push(self.body);
        parts.join(" ")
    }
}

impl<'a> From<&'a IssueRecord> for IssueText<'a> {
    fn from(issue: &'a IssueRecord) -> Self {
        Self {
            title: &issue.title,
            body: &issue.body,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("analyzer option `{key}`: {message}")]
pub struct OptionError {
    pub key: String,
    pub message: String,
}

/// Reads typed values out of an opaque `key -> string` option map.
pub(crate) fn option<T: FromStr>(
    options: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> Result<T, OptionError> {
    match options.get(key) {
        None => Ok(default),
        Some(raw) => raw.trim().parse().map_err(|_| OptionError {
            key: key.to_string(),
            message: format!("cannot parse `{raw}`"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn title_is_repeated() {
        let t = IssueText::new("Crash", "on save");
        assert_eq!(t.render(2), "Crash Crash on save");
        assert_eq!(t.render(0), "on save");
    }

    #[test]
    fn options_parse_or_default() {
        let mut m = BTreeMap::new();
        m.insert("threshold".to_string(), " 0.4 ".to_string());
        m.insert("top_k".to_string(), "many".to_string());
        assert_eq!(option(&m, "threshold", 0.6).unwrap(), 0.4);
        assert_eq!(option(&m, "absent", 7usize).unwrap(), 7);
        assert_eq!(option(&m, "top_k", 5usize).unwrap_err().key, "top_k");
    }
}
