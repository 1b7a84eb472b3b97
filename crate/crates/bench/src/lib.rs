//! Seeded synthetic workloads shared by the benchmarks.

use std::collections::BTreeSet;

use chrono::{TimeZone, Utc};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use triage_core::{IssueRecord, IssueState, RepoRef};

const VOCAB: &[&str] = &[
    "parser", "crash", "login", "session", "timeout", "cache", "export", "render", "widget", "socket", "upload",
    "memory", "leak", "config", "loader", "schema", "migration", "button", "dialog", "search", "index", "token",
    "thread", "deadlock", "queue", "worker", "scheduler", "report", "chart", "legend", "theme", "locale", "email",
    "webhook", "retry", "pagination", "archive", "import", "badge", "cookie",
];

pub fn repo() -> RepoRef {
    RepoRef::new("bench", "corpus", "main").expect("valid repo")
}

fn sentence(rng: &mut StdRng, words: usize) -> String {
    (0..words).map(|_| *VOCAB.choose(rng).expect("non-empty")).collect::<Vec<_>>().join(" ")
}

/// `n` issues numbered from 1 with 3-8 word titles and 10-40 word bodies.
pub fn issues(n: usize, seed: u64) -> Vec<IssueRecord> {
    let mut rng = StdRng::seed_from_u64(seed);
    let repo = repo();
    let at = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    (1..=n as u64)
        .map(|number| {
            let title_len = rng.random_range(3..=8);
            let body_len = rng.random_range(10..=40);
            IssueRecord {
                repo: repo.clone(),
                number,
                title: sentence(&mut rng, title_len),
                body: sentence(&mut rng, body_len),
                state: IssueState::Open,
                labels: BTreeSet::new(),
                url: format!("https://forge.test/bench/corpus/issues/{number}"),
                created_at: at,
                indexed_at: at,
            }
        })
        .collect()
}

/// `n` distinct source paths such as `src/cache/retry_loader.rs`.
pub fn paths(n: usize, seed: u64) -> Vec<String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    while out.len() < n {
        let dir = VOCAB.choose(&mut rng).expect("non-empty");
        let a = VOCAB.choose(&mut rng).expect("non-empty");
        let b = VOCAB.choose(&mut rng).expect("non-empty");
        let depth = rng.random_range(0..1000);
        out.insert(format!("src/{dir}/m{depth}/{a}_{b}.rs"));
    }
    out.into_iter().collect()
}
