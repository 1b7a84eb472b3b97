//! Core algorithms and domain types for the issue triage assistant.
//!
//! The crate is split by responsibility:
//!
//! * [`model`] and [`store`]: domain records and the persistent issue index.
//! * [`text`]: tokenization and sparse TF-IDF vectors with cosine similarity.
//! * [`plugin`]: the analyzer host, with isolation, deadlines and outcome validation.
//! * [`analyzers`]: reference duplicate, severity and localization analyzers.
//! * [`render`]: Markdown comments and labels posted back to the forge.
//! * [`eval`]: offline evaluation datasets and ranking metrics.

#![forbid(unsafe_code)]

pub mod analyzers;
pub mod eval;
pub mod model;
pub mod plugin;
pub mod render;
pub mod store;
pub mod text;

pub use model::{
    CodeFileRef, CommentKind, FeedbackBundle, FeedbackComment, IssueRecord, IssueState, Label,
    ModelError, RepoRef, SeverityClass,
};
pub use plugin::{
    AnalysisOutcome, AnalysisRequest, AnalysisResults, Analyzer, AnalyzerDescriptor,
    AnalyzerError, AnalyzerKind, ConsensusLocalizer, FailureReason, FailureRecord, PluginHost,
};
pub use store::{Store, StoreError, UpsertOutcome};
