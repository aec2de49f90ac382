//! TF-IDF keyword and keyphrase extraction over conversation histories.
//!
//! Every conversation is one document. Candidates are contiguous 1- to
//! 3-token spans inside a single context turn; a span is eligible only if
//! none of its tokens is a stopword, a reserved token, or free of
//! alphanumeric characters. A token scores `tf · idf` with `tf` counted
//! across the whole conversation, and a phrase scores the mean of its tokens.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::Serialize;

use crate::corpus::{Conversation, Dataset, TokenizerMode};
use crate::error::{Error, Result};
use crate::lm::Vocab;

pub const MAX_PHRASE_LEN: usize = 3;

const DEFAULT_STOPWORDS: &str = include_str!("../data/stopwords.txt");

/// Document frequencies over conversations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdfTable {
    doc_count: usize,
    df: HashMap<String, usize>,
}

impl IdfTable {
    /// Counts document frequencies over the distinct conversations of
    /// `corpus` (context turns only).
    pub fn build(corpus: &Dataset, mode: TokenizerMode) -> Self {
        Self::from_documents(corpus.conversations().into_iter().map(|c| {
            c.texts()
                .flat_map(|t| mode.split(t))
                .map(str::to_string)
                .collect::<Vec<_>>()
        }))
    }

    pub fn from_documents<I, D, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut doc_count = 0;
        for doc in docs {
            doc_count += 1;
            let distinct: HashSet<String> = doc.into_iter().map(|t| t.as_ref().to_string()).collect();
            for t in distinct {
                *df.entry(t).or_default() += 1;
            }
        }
        Self { doc_count, df }
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn df(&self, token: &str) -> usize {
        self.df.get(token).copied().unwrap_or(0)
    }

    /// `ln((1 + D) / (1 + df)) + 1`; always ≥ 1.
    pub fn idf(&self, token: &str) -> f64 {
        ((1 + self.doc_count) as f64 / (1 + self.df(token)) as f64).ln() + 1.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The bundled list (English function words and common Chinese particles).
    pub fn default_list() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    /// One token per line; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)
            .map(|s| Self::parse(&s))
            .map_err(|e| Error::io(path, e))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(&token.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeywordCandidate {
    pub tokens: Vec<String>,
    pub score: f64,
    /// 1-based turn of the first occurrence.
    pub source_turn: usize,
}

impl KeywordCandidate {
    pub fn text(&self, mode: TokenizerMode) -> String {
        let pieces: Vec<&str> = self.tokens.iter().map(String::as_str).collect();
        mode.join(&pieces)
    }
}

/// Ranking order: score descending, earlier source turn, then tokens
/// lexicographically.
pub fn rank_order(a: &KeywordCandidate, b: &KeywordCandidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.source_turn.cmp(&b.source_turn))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Clone, Debug)]
pub struct KeywordExtractor {
    pub idf: IdfTable,
    pub stopwords: Stopwords,
    pub mode: TokenizerMode,
}

impl KeywordExtractor {
    pub fn new(idf: IdfTable, stopwords: Stopwords, mode: TokenizerMode) -> Self {
        Self { idf, stopwords, mode }
    }

    fn eligible(&self, token: &str) -> bool {
        !Vocab::is_reserved_token(token) && !self.stopwords.contains(token) && token.chars().any(char::is_alphanumeric)
    }

    /// All candidates of `conv`, fully ranked.
    pub fn candidates(&self, conv: &Conversation) -> Vec<KeywordCandidate> {
        let turns: Vec<Vec<&str>> = conv.texts().map(|t| self.mode.split(t)).collect();
        let mut tf: HashMap<&str, usize> = HashMap::new();
        for &t in turns.iter().flatten() {
            *tf.entry(t).or_default() += 1;
        }
        let token_score = |t: &str| tf[t] as f64 * self.idf.idf(t);

        let mut seen: HashSet<&[&str]> = HashSet::new();
        let mut out = Vec::new();
        for (turn_idx, toks) in turns.iter().enumerate() {
            for len in 1..=MAX_PHRASE_LEN {
                for span in toks.windows(len) {
                    if !span.iter().all(|t| self.eligible(t)) || !seen.insert(span) {
                        continue;
                    }
                    let score = span.iter().map(|t| token_score(t)).sum::<f64>() / len as f64;
                    out.push(KeywordCandidate {
                        tokens: span.iter().map(|t| t.to_string()).collect(),
                        score,
                        source_turn: turn_idx + 1,
                    });
                }
            }
        }
        // Turns are visited in order, so the first insertion of a span
        // carries its earliest source turn.
        out.sort_by(rank_order);
        out
    }

    /// The `top_k` best candidates of `conv`.
    pub fn extract(&self, conv: &Conversation, top_k: usize) -> Vec<KeywordCandidate> {
        let mut all = self.candidates(conv);
        all.truncate(top_k);
        all
    }
}
