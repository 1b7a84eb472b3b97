use std::collections::{BTreeMap, BTreeSet};

use super::{option, IssueText, OptionError, DEFAULT_TITLE_REPEAT};
use crate::model::CodeFileRef;
use crate::plugin::{AnalysisOutcome, AnalysisRequest, Analyzer, AnalyzerError, ScoredPath};
use crate::text::{cosine, tfidf_vector, tokenize, Corpus, TokenStream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalizationConfig {
    pub top_k: usize,
    pub title_repeat: usize,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            title_repeat: DEFAULT_TITLE_REPEAT,
        }
    }
}

impl LocalizationConfig {
    pub fn from_options(options: &BTreeMap<String, String>) -> Result<Self, OptionError> {
        let d = Self::default();
        let cfg = Self {
            top_k: option(options, "top_k", d.top_k)?,
            title_repeat: option(options, "title_repeat", d.title_repeat)?,
        };
        if cfg.top_k == 0 {
            return Err(OptionError {
                key: "top_k".into(),
                message: "must be positive".into(),
            });
        }
        Ok(cfg)
    }
}

/// Ranks file paths by cosine similarity between the issue text and the
/// tokenized path. Files scoring zero are never returned.
pub fn localize_bugs(
    issue: IssueText<'_>,
    paths: &[&str],
    cfg: &LocalizationConfig,
) -> Vec<ScoredPath> {
    let unique: BTreeSet<&str> = paths.iter().copied().collect();
    if unique.is_empty() {
        return Vec::new();
    }
    let query = tokenize(&issue.render(cfg.title_repeat));
    let docs: Vec<(&str, TokenStream)> = unique.iter().map(|p| (*p, tokenize(p))).collect();
    let corpus = Corpus::build(std::iter::once(&query).chain(docs.iter().map(|(_, t)| t)));
    let query_vec = tfidf_vector(&query, &corpus).expect("corpus holds the query");

    let mut ranked: Vec<ScoredPath> = docs
        .iter()
        .map(|(path, tokens)| ScoredPath {
            path: path.to_string(),
            score: cosine(&query_vec, &tfidf_vector(tokens, &corpus).expect("non-empty corpus")),
        })
        .filter(|s| s.score > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.path.cmp(&b.path)));
    ranked.truncate(cfg.top_k);
    ranked
}

pub struct LocalizationAnalyzer {
    cfg: LocalizationConfig,
}

impl LocalizationAnalyzer {
    pub fn new(cfg: LocalizationConfig) -> Self {
        Self { cfg }
    }
}

impl Analyzer for LocalizationAnalyzer {
    fn analyze(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError> {
        let paths: Vec<&str> = request.files.iter().map(|f: &CodeFileRef| f.path.as_str()).collect();
        Ok(AnalysisOutcome::Localization(localize_bugs(
            IssueText::from(&request.issue),
            &paths,
            &self.cfg,
        )))
    }
}
