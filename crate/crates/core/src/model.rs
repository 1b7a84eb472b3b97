//! Domain records shared by the store, the analyzers and the forge gateway.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid repository reference: {0}")]
    InvalidRepo(String),
    #[error("invalid issue record: {0}")]
    InvalidIssue(String),
    #[error("invalid code file reference: {0}")]
    InvalidFile(String),
    #[error("unknown severity class `{0}`")]
    UnknownSeverity(String),
}

/// A forge repository, identified by `owner/name`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RepoRef {
    pub owner: String,
    pub name: String,
    pub default_branch: String,
}

impl RepoRef {
    pub fn new(
        owner: impl Into<String>,
        name: impl Into<String>,
        default_branch: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let repo = Self {
            owner: owner.into(),
            name: name.into(),
            default_branch: default_branch.into(),
        };
        repo.validate()?;
        Ok(repo)
    }

    /// Parses `owner/name`, using `main` as the default branch.
    pub fn parse_slug(slug: &str) -> Result<Self, ModelError> {
        match slug.split_once('/') {
            Some((owner, name)) => Self::new(owner, name, "main"),
            None => Err(ModelError::InvalidRepo(format!(
                "expected `owner/name`, got `{slug}`"
            ))),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, value) in [("owner", &self.owner), ("name", &self.name)] {
            if value.is_empty() {
                return Err(ModelError::InvalidRepo(format!("{field} is empty")));
            }
            if value.contains('/') {
                return Err(ModelError::InvalidRepo(format!("{field} contains `/`")));
            }
        }
        if self.default_branch.is_empty() {
            return Err(ModelError::InvalidRepo("default branch is empty".into()));
        }
        Ok(())
    }

    /// Canonical lowercase `owner/name` key.
    pub fn key(&self) -> String {
        format!("{}/{}", self.owner, self.name).to_lowercase()
    }
}

impl fmt::Display for RepoRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.owner, self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IssueState {
    Open,
    Closed,
}

impl IssueState {
    pub fn as_str(self) -> &'static str {
        match self {
            IssueState::Open => "open",
            IssueState::Closed => "closed",
        }
    }
}

impl FromStr for IssueState {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open" => Ok(IssueState::Open),
            "closed" => Ok(IssueState::Closed),
            other => Err(ModelError::InvalidIssue(format!("unknown state `{other}`"))),
        }
    }
}

/// One indexed issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueRecord {
    pub repo: RepoRef,
    pub number: u64,
    pub title: String,
    pub body: String,
    pub state: IssueState,
    pub labels: BTreeSet<String>,
    pub url: String,
    pub created_at: DateTime<Utc>,
    pub indexed_at: DateTime<Utc>,
}

impl IssueRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.repo.validate()?;
        if self.number == 0 {
            return Err(ModelError::InvalidIssue("issue number must be positive".into()));
        }
        if self.url.is_empty() {
            return Err(ModelError::InvalidIssue(format!(
                "issue #{} has an empty url",
                self.number
            )));
        }
        Ok(())
    }
}

/// A file in the latest snapshot of a repository's default branch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodeFileRef {
    pub repo: RepoRef,
    pub path: String,
    pub url: String,
}

impl CodeFileRef {
    pub fn new(repo: RepoRef, path: impl Into<String>, url: impl Into<String>) -> Result<Self, ModelError> {
        let path = path.into();
        if path.is_empty() {
            return Err(ModelError::InvalidFile("path is empty".into()));
        }
        if path.starts_with('/') {
            return Err(ModelError::InvalidFile(format!("path `{path}` has a leading slash")));
        }
        Ok(Self {
            repo,
            path,
            url: url.into(),
        })
    }
}

/// Five severity classes, ordered `Blocker > Critical > Major > Minor > Trivial`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeverityClass {
    Trivial,
    Minor,
    Major,
    Critical,
    Blocker,
}

impl SeverityClass {
    /// All classes, most severe first.
    pub const ALL: [SeverityClass; 5] = [
        SeverityClass::Blocker,
        SeverityClass::Critical,
        SeverityClass::Major,
        SeverityClass::Minor,
        SeverityClass::Trivial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SeverityClass::Blocker => "Blocker",
            SeverityClass::Critical => "Critical",
            SeverityClass::Major => "Major",
            SeverityClass::Minor => "Minor",
            SeverityClass::Trivial => "Trivial",
        }
    }

    /// Position in [`SeverityClass::ALL`].
    pub fn index(self) -> usize {
        4 - self as usize
    }
}

impl fmt::Display for SeverityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeverityClass {
    type Err = ModelError;

    /// Case-sensitive: only the exact class names are accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SeverityClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ModelError::UnknownSeverity(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommentKind {
    SimilarIssues,
    BugLocalization,
}

impl CommentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CommentKind::SimilarIssues => "similar_issues",
            CommentKind::BugLocalization => "bug_localization",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub name: String,
    /// Six hex digits, no leading `#`.
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackComment {
    pub kind: CommentKind,
    pub markdown_body: String,
}

/// Everything the assistant posts for one new issue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackBundle {
    pub repo: RepoRef,
    pub number: u64,
    /// Absent when the severity analyzer failed.
    pub severity_label: Option<Label>,
    pub duplicate_label: Option<Label>,
    pub comments: Vec<FeedbackComment>,
}

impl FeedbackBundle {
    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(label) = &self.severity_label {
            label.name.parse::<SeverityClass>()?;
            if !is_hex_color(&label.color) {
                return Err(ModelError::InvalidIssue(format!("bad label color `{}`", label.color)));
            }
        }
        let mut seen = BTreeSet::new();
        for comment in &self.comments {
            if !seen.insert(comment.kind) {
                return Err(ModelError::InvalidIssue(format!(
                    "more than one {} comment",
                    comment.kind.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn comment(&self, kind: CommentKind) -> Option<&FeedbackComment> {
        self.comments.iter().find(|c| c.kind == kind)
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.severity_label.iter().chain(self.duplicate_label.iter())
    }
}

pub fn is_hex_color(s: &str) -> bool {
    s.len() == 6 && s.chars().all(|c| c.is_ascii_hexdigit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repo_key_is_lowercase() {
        let repo = RepoRef::new("Octo", "Hello-World", "main").unwrap();
        assert_eq!(repo.key(), "octo/hello-world");
    }

    #[test]
    fn repo_rejects_slash_and_empty() {
        assert!(RepoRef::new("a/b", "c", "main").is_err());
        assert!(RepoRef::new("", "c", "main").is_err());
        assert!(RepoRef::new("a", "c", "").is_err());
        assert!(RepoRef::parse_slug("nope").is_err());
    }

    #[test]
    fn severity_order_and_names() {
        assert!(SeverityClass::Blocker > SeverityClass::Critical);
        assert!(SeverityClass::Critical > SeverityClass::Major);
        assert!(SeverityClass::Major > SeverityClass::Minor);
        assert!(SeverityClass::Minor > SeverityClass::Trivial);
        for (i, class) in SeverityClass::ALL.into_iter().enumerate() {
            assert_eq!(class.index(), i);
            assert_eq!(class.name().parse::<SeverityClass>().unwrap(), class);
        }
        assert!("blocker".parse::<SeverityClass>().is_err());
    }

    #[test]
    fn file_path_rules() {
        let repo = RepoRef::new("o", "r", "main").unwrap();
        assert!(CodeFileRef::new(repo.clone(), "/abs", "u").is_err());
        assert!(CodeFileRef::new(repo.clone(), "", "u").is_err());
        assert!(CodeFileRef::new(repo, "src/a.rs", "u").is_ok());
    }
}
