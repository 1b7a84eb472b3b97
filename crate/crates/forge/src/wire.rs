//! JSON shapes of the forge REST and webhook subset. The client, the
//! webhook handler and the simulator all use these, so the two sides of the
//! wire cannot drift apart.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use triage_core::{IssueRecord, IssueState, ModelError, RepoRef};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireUser {
    pub login: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRepo {
    pub name: String,
    pub owner: WireUser,
    #[serde(default = "main_branch")]
    pub default_branch: String,
}

fn main_branch() -> String {
    "main".into()
}

impl WireRepo {
    pub fn to_ref(&self) -> Result<RepoRef, ModelError> {
        RepoRef::new(&self.owner.login, &self.name, &self.default_branch)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireLabel {
    pub name: String,
    #[serde(default)]
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireIssue {
    pub number: u64,
    pub title: String,
    #[serde(default)]
    pub body: Option<String>,
    pub state: String,
    pub html_url: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub labels: Vec<WireLabel>,
    /// Present when the entry is a pull request; the issues listing mixes
    /// both.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pull_request: Option<serde_json::Value>,
}

impl WireIssue {
    pub fn is_pull_request(&self) -> bool {
        self.pull_request.is_some()
    }

    pub fn to_record(&self, repo: &RepoRef, indexed_at: DateTime<Utc>) -> Result<IssueRecord, ModelError> {
        let record = IssueRecord {
            repo: repo.clone(),
            number: self.number,
            title: self.title.clone(),
            body: self.body.clone().unwrap_or_default(),
            state: self.state.parse::<IssueState>()?,
            labels: self.labels.iter().map(|l| l.name.clone()).collect::<BTreeSet<_>>(),
            url: self.html_url.clone(),
            created_at: self.created_at,
            indexed_at,
        };
        record.validate()?;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTreeEntry {
    pub path: String,
    #[serde(rename = "type")]
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireTree {
    pub tree: Vec<WireTreeEntry>,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireComment {
    pub id: u64,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewComment {
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddLabels {
    pub labels: Vec<String>,
}

/// Payload of an `issues` webhook event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuesEvent {
    pub action: String,
    pub issue: WireIssue,
    pub repository: WireRepo,
}
