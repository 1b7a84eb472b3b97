//! Tokenization and sparse TF-IDF vectors.
//!
//! Every analyzer shares this engine, so all of it is deterministic: vectors
//! are stored in lexicographic term order and every sum (norms, dot products,
//! centroids) accumulates in that order.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The shipped stop list, one lowercase token per line.
pub const STOP_LIST: &str = include_str!("../data/stopwords.txt");

fn stop_words() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        STOP_LIST
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn is_stop_word(token: &str) -> bool {
    stop_words().contains(token)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("corpus has no documents")]
    EmptyCorpus,
    #[error("invalid token `{0}`")]
    InvalidToken(String),
}

/// Lowercase tokens in document order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    tokens: Vec<String>,
}

impl TokenStream {
    /// Builds a stream from pre-split tokens, checking the token invariants.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TextError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        for t in &tokens {
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(TextError::InvalidToken(t.clone()));
            }
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Raw term counts.
    pub fn counts(&self) -> BTreeMap<&str, u32> {
        let mut counts = BTreeMap::new();
        for t in &self.tokens {
            *counts.entry(t.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Splits text into lowercase tokens.
///
/// Splits on non-alphanumeric characters, then at camelCase and letter/digit
/// boundaries, lowercases, drops tokens shorter than two characters and drops
/// stop words.
pub fn tokenize(text: &str) -> TokenStream {
    let mut tokens = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric()) {
        if word.is_empty() {
            continue;
        }
        for piece in split_identifier(word) {
            // Characters with no lowercase mapping that are still uppercase
            // (e.g. mathematical capitals) are dropped.
            let lowered: String = piece
                .chars()
                .filter_map(|c| c.to_lowercase().next())
                .filter(|c| !c.is_uppercase())
                .collect();
            if lowered.chars().count() < 2 || is_stop_word(&lowered) {
                continue;
            }
            tokens.push(lowered);
        }
    }
    TokenStream { tokens }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Upper,
    Lower,
    Digit,
    Other,
}

fn classify(c: char) -> CharClass {
    if c.is_numeric() {
        CharClass::Digit
    } else if c.is_uppercase() {
        CharClass::Upper
    } else if c.is_lowercase() {
        CharClass::Lower
    } else {
        CharClass::Other
    }
}

/// Splits an alphanumeric run at camelCase, acronym and letter/digit boundaries.
fn split_identifier(word: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    for i in 1..chars.len() {
        let prev = classify(chars[i - 1].1);
        let cur = classify(chars[i].1);
        let next = chars.get(i + 1).map(|&(_, c)| classify(c));
        let boundary = match (prev, cur) {
            (CharClass::Lower, CharClass::Upper) => true,
            (CharClass::Digit, c) | (c, CharClass::Digit) if c != CharClass::Digit => true,
            // "HTTPServer": split before the `S`.
            (CharClass::Upper, CharClass::Upper) => next == Some(CharClass::Lower),
            _ => false,
        };
        if boundary {
            pieces.push(&word[chars[start].0..chars[i].0]);
            start = i;
        }
    }
    if start < chars.len() {
        pieces.push(&word[chars[start].0..]);
    }
    pieces
}

/// Document frequencies over a set of token streams.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    doc_count: usize,
    doc_freq: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn build<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenStream>,
    {
        let mut corpus = Corpus::default();
        for doc in docs {
            corpus.add(doc);
        }
        corpus
    }

    pub fn add(&mut self, doc: &TokenStream) {
        self.doc_count += 1;
        let unique: BTreeSet<&str> = doc.tokens.iter().map(String::as_str).collect();
        for term in unique {
            *self.doc_freq.entry(term.to_string()).or_insert(0) += 1;
        }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn doc_freqs(&self) -> &BTreeMap<String, usize> {
        &self.doc_freq
    }

    /// `ln((N + 1) / (df + 1))`.
    pub fn idf(&self, term: &str) -> f64 {
        ((self.doc_count as f64 + 1.0) / (self.doc_freq(term) as f64 + 1.0)).ln()
    }
}

/// Sparse non-negative term weights with a cached Euclidean norm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TermVector {
    weights: BTreeMap<String, f64>,
    norm: f64,
}

impl TermVector {
    /// Drops zero (and non-finite or negative) weights and computes the norm.
    pub fn from_weights<I, S>(weights: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let weights: BTreeMap<String, f64> = weights
            .into_iter()
            .filter(|(_, w)| w.is_finite() && *w > 0.0)
            .map(|(t, w)| (t.into(), w))
            .collect();
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        Self { weights, norm }
    }

    pub fn weights(&self) -> &BTreeMap<String, f64> {
        &self.weights
    }

    pub fn weight(&self, term: &str) -> f64 {
        self.weights.get(term).copied().unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn is_zero(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_weights(self.weights.iter().map(|(t, w)| (t.clone(), w * factor)))
    }

    /// Dot product, accumulated in lexicographic term order.
    pub fn dot(&self, other: &TermVector) -> f64 {
        let mut a = self.weights.iter().peekable();
        let mut b = other.weights.iter().peekable();
        let mut sum = 0.0;
        while let (Some((ta, wa)), Some((tb, wb))) = (a.peek(), b.peek()) {
            match ta.cmp(tb) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    sum += *wa * *wb;
                    a.next();
                    b.next();
                }
            }
        }
        sum
    }

    /// Arithmetic mean of `vectors`, term by term.
    pub fn mean<'a, I>(vectors: I) -> Self
    where
        I: IntoIterator<Item = &'a TermVector>,
    {
        let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
        let mut n = 0usize;
        for v in vectors {
            n += 1;
            for (t, w) in &v.weights {
                *sums.entry(t.as_str()).or_insert(0.0) += w;
            }
        }
        if n == 0 {
            return Self::default();
        }
        Self::from_weights(sums.into_iter().map(|(t, s)| (t, s / n as f64)))
    }
}

/// `(1 + ln tf) * ln((N + 1) / (df + 1))` per term.
pub fn tfidf_vector(doc: &TokenStream, corpus: &Corpus) -> Result<TermVector, TextError> {
    if corpus.doc_count == 0 {
        return Err(TextError::EmptyCorpus);
    }
    Ok(TermVector::from_weights(doc.counts().into_iter().map(
        |(term, count)| {
            let tf = 1.0 + f64::from(count).ln();
            (term, tf * corpus.idf(term))
        },
    )))
}

/// Cosine similarity in `[0, 1]`; zero when either vector is zero.
pub fn cosine(u: &TermVector, v: &TermVector) -> f64 {
    if u.norm == 0.0 || v.norm == 0.0 {
        return 0.0;
    }
    (u.dot(v) / (u.norm * v.norm)).clamp(0.0, 1.0)
}
