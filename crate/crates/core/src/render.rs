//! Turns analysis outcomes into the labels and Markdown comments posted on
//! the issue. Everything here is pure: identical inputs give byte-identical
//! output.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{
    CodeFileRef, CommentKind, FeedbackBundle, FeedbackComment, IssueRecord, Label, SeverityClass,
};
use crate::plugin::{AnalysisOutcome, AnalysisResults};

pub const SIMILAR_TEMPLATE: &str = include_str!("../templates/similar_issues.md");
pub const LOCALIZATION_TEMPLATE: &str = include_str!("../templates/bug_localization.md");

/// Prefix of the hidden marker that tags every comment this tool posts.
pub const MARKER_TOOL_ID: &str = "triage-assist";

pub const DUPLICATE_LABEL: &str = "Duplicate";

/// Label names and colors (six hex digits, no `#`), red for the most severe
/// class through yellow for the least.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPalette {
    pub severity: BTreeMap<SeverityClass, String>,
    pub duplicate_name: String,
    pub duplicate_color: String,
}

impl Default for LabelPalette {
    fn default() -> Self {
        Self {
            severity: BTreeMap::from([
                (SeverityClass::Blocker, "B60205".to_string()),
                (SeverityClass::Critical, "D93F0B".to_string()),
                (SeverityClass::Major, "E99695".to_string()),
                (SeverityClass::Minor, "FBCA04".to_string()),
                (SeverityClass::Trivial, "FEF2C0".to_string()),
            ]),
            duplicate_name: DUPLICATE_LABEL.to_string(),
            duplicate_color: "CFD3D7".to_string(),
        }
    }
}

impl LabelPalette {
    pub fn severity_color(&self, class: SeverityClass) -> &str {
        self.severity
            .get(&class)
            .map(String::as_str)
            .unwrap_or_else(|| default_severity_color(class))
    }
}

fn default_severity_color(class: SeverityClass) -> &'static str {
    match class {
        SeverityClass::Blocker => "B60205",
        SeverityClass::Critical => "D93F0B",
        SeverityClass::Major => "E99695",
        SeverityClass::Minor => "FBCA04",
        SeverityClass::Trivial => "FEF2C0",
    }
}

/// Hidden HTML comment identifying the tool and the comment kind.
pub fn comment_marker(kind: CommentKind) -> String {
    format!("<!-- {MARKER_TOOL_ID}:{} -->", kind.as_str())
}

/// The kind of a comment previously posted by this tool, if any.
pub fn find_marker(body: &str) -> Option<CommentKind> {
    [CommentKind::SimilarIssues, CommentKind::BugLocalization]
        .into_iter()
        .find(|k| body.contains(&comment_marker(*k)))
}

/// Two decimals, rounding halves up.
pub fn format_score(score: f64) -> String {
    // Snap to 1e-6 first so 0.835 stored as 0.83499999... rounds up.
    let scaled = (score * 100.0 * 1e6).round() / 1e6;
    let cents = (scaled + 0.5).floor().max(0.0) as u64;
    format!("{}.{:02}", cents / 100, cents % 100)
}

/// Backslash-escapes Markdown punctuation and flattens line breaks.
pub fn escape_markdown(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.replace("\r\n", "\n").chars() {
        match c {
            '\\' | '`' | '*' | '_' | '{' | '}' | '[' | ']' | '(' | ')' | '<' | '>' | '#' | '!'
            | '|' | '~' | '&' => {
                out.push('\\');
                out.push(c);
            }
            '\r' | '\n' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

fn fill(template: &str, kind: CommentKind, items: &str) -> String {
    template
        .replace("{{marker}}", &comment_marker(kind))
        .replace("{{items}}", items)
}

/// `None` for an empty list: no comment is posted rather than an empty one.
pub fn render_similar_comment(suggestions: &[(&IssueRecord, f64)]) -> Option<String> {
    if suggestions.is_empty() {
        return None;
    }
    let items: Vec<String> = suggestions
        .iter()
        .map(|(issue, score)| {
            format!(
                "- #{} — {} ({}) — similarity {}",
                issue.number,
                escape_markdown(&issue.title),
                issue.url,
                format_score(*score)
            )
        })
        .collect();
    Some(fill(SIMILAR_TEMPLATE, CommentKind::SimilarIssues, &items.join("\n")))
}

pub fn render_localization_comment(ranked: &[(&CodeFileRef, f64)], top_k: usize) -> Option<String> {
    if ranked.is_empty() || top_k == 0 {
        return None;
    }
    let items: Vec<String> = ranked
        .iter()
        .take(top_k)
        .enumerate()
        .map(|(i, (file, score))| {
            format!(
                "{}. {} ({}) — score {}",
                i + 1,
                escape_markdown(&file.path),
                file.url,
                format_score(*score)
            )
        })
        .collect();
    Some(fill(LOCALIZATION_TEMPLATE, CommentKind::BugLocalization, &items.join("\n")))
}

pub fn severity_to_label(class: SeverityClass, palette: &LabelPalette) -> Label {
    Label {
        name: class.name().to_string(),
        color: palette.severity_color(class).to_string(),
    }
}

/// A single duplicate label when there is at least one suggestion.
pub fn duplicate_label<T>(suggestions: &[T], palette: &LabelPalette) -> Option<Label> {
    (!suggestions.is_empty()).then(|| Label {
        name: palette.duplicate_name.clone(),
        color: palette.duplicate_color.clone(),
    })
}

/// Assembles the bundle from whichever analyses succeeded.
pub fn build_bundle(
    issue: &IssueRecord,
    results: &AnalysisResults,
    candidates: &[IssueRecord],
    files: &[CodeFileRef],
    palette: &LabelPalette,
    top_k: usize,
) -> FeedbackBundle {
    let mut bundle = FeedbackBundle {
        repo: issue.repo.clone(),
        number: issue.number,
        severity_label: None,
        duplicate_label: None,
        comments: Vec::new(),
    };

    if let Ok(AnalysisOutcome::Duplicate(list)) = &results.duplicate {
        let by_number: HashMap<u64, &IssueRecord> =
            candidates.iter().map(|c| (c.number, c)).collect();
        let suggestions: Vec<(&IssueRecord, f64)> = list
            .iter()
            .filter_map(|s| by_number.get(&s.number).map(|c| (*c, s.score)))
            .collect();
        bundle.duplicate_label = duplicate_label(&suggestions, palette);
        if let Some(body) = render_similar_comment(&suggestions) {
            bundle.comments.push(FeedbackComment {
                kind: CommentKind::SimilarIssues,
                markdown_body: body,
            });
        }
    }

    if let Ok(AnalysisOutcome::Severity { class, .. }) = &results.severity {
        bundle.severity_label = Some(severity_to_label(*class, palette));
    }

    if let Ok(AnalysisOutcome::Localization(list)) = &results.localization {
        let by_path: HashMap<&str, &CodeFileRef> =
            files.iter().map(|f| (f.path.as_str(), f)).collect();
        let ranked: Vec<(&CodeFileRef, f64)> = list
            .iter()
            .filter_map(|s| by_path.get(s.path.as_str()).map(|f| (*f, s.score)))
            .collect();
        if let Some(body) = render_localization_comment(&ranked, top_k) {
            bundle.comments.push(FeedbackComment {
                kind: CommentKind::BugLocalization,
                markdown_body: body,
            });
        }
    }
    bundle
}
