use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use rayon::ThreadPool;

use super::{option, IssueText, OptionError, DEFAULT_TITLE_REPEAT};
use crate::model::IssueRecord;
use crate::plugin::{AnalysisOutcome, AnalysisRequest, Analyzer, AnalyzerError, ScoredIssue};
use crate::text::{cosine, tfidf_vector, tokenize, Corpus, TokenStream};

#[derive(Debug, Clone, PartialEq)]
pub struct DuplicateConfig {
    /// Minimum cosine for a suggestion, in (0, 1).
    pub threshold: f64,
    pub max_suggestions: usize,
    pub title_repeat: usize,
}

impl Default for DuplicateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            max_suggestions: 5,
            title_repeat: DEFAULT_TITLE_REPEAT,
        }
    }
}

impl DuplicateConfig {
    pub fn from_options(options: &BTreeMap<String, String>) -> Result<Self, OptionError> {
        let d = Self::default();
        let cfg = Self {
            threshold: option(options, "threshold", d.threshold)?,
            max_suggestions: option(options, "max_suggestions", d.max_suggestions)?,
            title_repeat: option(options, "title_repeat", d.title_repeat)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OptionError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(OptionError {
                key: "threshold".into(),
                message: format!("{} is outside (0, 1)", self.threshold),
            });
        }
        if self.max_suggestions == 0 {
            return Err(OptionError {
                key: "max_suggestions".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Scores every candidate against `issue` and returns those at or above the
/// threshold, best first (ties by ascending number), at most
/// `max_suggestions` of them.
///
/// With a pool, tokenization and scoring fan out across its workers; each
/// score depends only on its own pair and the shared corpus, so the result
/// is identical for every pool size and candidate order.
pub fn detect_duplicates(
    issue: &IssueRecord,
    candidates: &[IssueRecord],
    cfg: &DuplicateConfig,
    pool: Option<&ThreadPool>,
) -> Vec<ScoredIssue> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let tokenize_issue =
        |c: &IssueRecord| tokenize(&IssueText::from(c).render(cfg.title_repeat));
    let query = tokenize_issue(issue);
    let docs: Vec<TokenStream> = match pool {
        Some(pool) => pool.install(|| candidates.par_iter().map(tokenize_issue).collect()),
        None => candidates.iter().map(tokenize_issue).collect(),
    };

    let corpus = Corpus::build(std::iter::once(&query).chain(docs.iter()));
    let query_vec = tfidf_vector(&query, &corpus).expect("corpus holds the query");
    let score = |(c, doc): (&IssueRecord, &TokenStream)| {
        let v = tfidf_vector(doc, &corpus).expect("corpus is non-empty");
        ScoredIssue {
            number: c.number,
            score: cosine(&query_vec, &v),
        }
    };
    let scored: Vec<ScoredIssue> = match pool {
        Some(pool) => pool.install(|| candidates.par_iter().zip(docs.par_iter()).map(score).collect()),
        None => candidates.iter().zip(docs.iter()).map(score).collect(),
    };

    let mut hits: Vec<ScoredIssue> = scored
        .into_iter()
        .filter(|s| s.score >= cfg.threshold)
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.number.cmp(&b.number)));
    hits.truncate(cfg.max_suggestions);
    hits
}

/// Plugin wrapper around [`detect_duplicates`] with its own worker pool.
pub struct DuplicateAnalyzer {
    cfg: DuplicateConfig,
    pool: Option<Arc<ThreadPool>>,
}

impl DuplicateAnalyzer {
    /// `pool_size` of 0 or 1 scores serially.
    pub fn new(cfg: DuplicateConfig, pool_size: usize) -> Result<Self, AnalyzerError> {
        let pool = if pool_size > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(pool_size)
                .thread_name(|i| format!("duplicate-{i}"))
                .build()
                .map_err(|e| AnalyzerError::new(format!("worker pool: {e}")))?;
            Some(Arc::new(pool))
        } else {
            None
        };
        Ok(Self { cfg, pool })
    }

    pub fn config(&self) -> &DuplicateConfig {
        &self.cfg
    }
}

impl Analyzer for DuplicateAnalyzer {
    fn analyze(&self, request: &AnalysisRequest) -> Result<AnalysisOutcome, AnalyzerError> {
        let candidates: Vec<IssueRecord> = request
            .candidates
            .iter()
            .filter(|c| c.number != request.issue.number)
            .cloned()
            .collect();
        Ok(AnalysisOutcome::Duplicate(detect_duplicates(
            &request.issue,
            &candidates,
            &self.cfg,
            self.pool.as_deref(),
        )))
    }
}
