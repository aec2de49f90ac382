//! Interpolated Kneser–Ney n-gram language model.
//!
//! The highest order uses raw counts; every lower order uses continuation
//! counts (the number of distinct left extensions of an n-gram). Each order
//! interpolates with the one below it, and the unigram level interpolates
//! with the uniform distribution over the vocabulary, so every token has
//! strictly positive probability in every context.
//!
//! Sequences are left-padded to `order - 1` BOS tokens, so all contexts are
//! full length.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{encode_training_sequence, LanguageModel, ProbDist, TokenId, Vocab, BOS};
use crate::corpus::{Dataset, Tokenizer, TokenizerMode};
use crate::error::{Error, Result};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_DISCOUNT: f64 = 0.75;

const MAGIC: &str = "hardneg-ngram";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ContextStats {
    total: u64,
    /// `(token, count)` sorted by token id.
    followers: Vec<(TokenId, u64)>,
}

impl ContextStats {
    fn count(&self, token: TokenId) -> u64 {
        self.followers
            .binary_search_by_key(&token, |&(t, _)| t)
            .map(|i| self.followers[i].1)
            .unwrap_or(0)
    }

    fn distinct(&self) -> u64 {
        self.followers.len() as u64
    }
}

#[derive(Clone, Debug)]
pub struct NGramLM {
    order: usize,
    discount: f64,
    tokenizer: Tokenizer,
    /// `tables[m - 1]` maps an order-`m` context (length `m - 1`) to its
    /// follower statistics.
    tables: Vec<HashMap<Vec<TokenId>, ContextStats>>,
}

/// Trains a model on the positive examples of `corpus`, fitting a fresh
/// vocabulary over every utterance in the corpus.
pub fn train_ngram(corpus: &Dataset, order: usize, mode: TokenizerMode) -> Result<NGramLM> {
    if corpus.is_empty() {
        return Err(Error::Training("empty corpus".into()));
    }
    let texts = corpus
        .examples
        .iter()
        .flat_map(|e| e.context.texts().chain(std::iter::once(e.response.text())));
    let tokenizer = Tokenizer::fit(mode, texts);
    train_ngram_with_tokenizer(corpus, order, tokenizer)
}

pub fn train_ngram_with_tokenizer(corpus: &Dataset, order: usize, tokenizer: Tokenizer) -> Result<NGramLM> {
    let sequences: Vec<Vec<TokenId>> = corpus
        .examples
        .iter()
        .filter(|e| e.label.is_positive())
        .map(|e| encode_training_sequence(&tokenizer, &e.context, &tokenizer.tokenize(e.response.text())))
        .collect();
    if sequences.is_empty() {
        return Err(Error::Training("corpus has no positive examples".into()));
    }
    NGramLM::from_sequences(tokenizer, order, DEFAULT_DISCOUNT, &sequences)
}

impl NGramLM {
    /// Estimates the model from already-encoded sequences. Each sequence
    /// should begin with BOS.
    pub fn from_sequences(
        tokenizer: Tokenizer,
        order: usize,
        discount: f64,
        sequences: &[Vec<TokenId>],
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::Training("order must be at least 1".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::Training(format!("discount {discount} outside (0, 1)")));
        }
        if sequences.iter().all(|s| s.len() < 2) {
            return Err(Error::Training("no tokens to count".into()));
        }
        let vocab_len = tokenizer.vocab().len() as TokenId;
        if let Some(bad) = sequences.iter().flatten().find(|&&t| t >= vocab_len) {
            return Err(Error::Training(format!("token id {bad} outside vocabulary")));
        }

        // Raw counts of full-order n-grams over padded sequences.
        let mut top: HashMap<Vec<TokenId>, u64> = HashMap::new();
        for seq in sequences {
            let padded = pad(seq, order);
            // Position `order - 1` is the first BOS; predict everything after it.
            for j in order..padded.len() {
                *top.entry(padded[j + 1 - order..=j].to_vec()).or_default() += 1;
            }
        }

        // Continuation counts: each distinct (m+1)-gram contributes one to its suffix.
        let mut levels: Vec<HashMap<Vec<TokenId>, u64>> = vec![top];
        for _ in 1..order {
            let upper = levels.last().expect("non-empty");
            let mut lower: HashMap<Vec<TokenId>, u64> = HashMap::new();
            for gram in upper.keys() {
                *lower.entry(gram[1..].to_vec()).or_default() += 1;
            }
            levels.push(lower);
        }
        levels.reverse();

        let tables = levels
            .into_iter()
            .map(|grams| {
                let mut by_ctx: HashMap<Vec<TokenId>, ContextStats> = HashMap::new();
                for (gram, count) in grams {
                    let (ctx, last) = gram.split_at(gram.len() - 1);
                    let stats = by_ctx.entry(ctx.to_vec()).or_insert(ContextStats {
                        total: 0,
                        followers: Vec::new(),
                    });
                    stats.total += count;
                    stats.followers.push((last[0], count));
                }
                for stats in by_ctx.values_mut() {
                    stats.followers.sort_unstable();
                }
                by_ctx
            })
            .collect();

        Ok(Self {
            order,
            discount,
            tokenizer,
            tables,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn vocab(&self) -> &Vocab {
        self.tokenizer.vocab()
    }

    /// The last `order - 1` tokens of `context`, left-padded with BOS.
    fn window(&self, context: &[TokenId]) -> Vec<TokenId> {
        let need = self.order - 1;
        let mut w = Vec::with_capacity(need);
        let have = context.len().min(need);
        w.extend(std::iter::repeat_n(BOS, need - have));
        w.extend_from_slice(&context[context.len() - have..]);
        w
    }

    fn stats(&self, m: usize, window: &[TokenId]) -> Option<&ContextStats> {
        let ctx = &window[window.len() + 1 - m..];
        self.tables[m - 1].get(ctx)
    }

    /// Probability of a single token, computed without materializing the
    /// full distribution.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let window = self.window(context);
        let mut p = 1.0 / self.vocab().len() as f64;
        for m in 1..=self.order {
            if let Some(s) = self.stats(m, &window) {
                let total = s.total as f64;
                let c = s.count(token) as f64;
                p = (c - self.discount).max(0.0) / total + self.discount * s.distinct() as f64 / total * p;
            }
        }
        p
    }

    /// Full next-token distribution.
    pub fn distribution(&self, context: &[TokenId]) -> ProbDist {
        let window = self.window(context);
        let v = self.vocab().len();
        let mut dist = vec![1.0 / v as f64; v];
        for m in 1..=self.order {
            if let Some(s) = self.stats(m, &window) {
                let total = s.total as f64;
                let backoff = self.discount * s.distinct() as f64 / total;
                dist.iter_mut().for_each(|p| *p *= backoff);
                for &(t, c) in &s.followers {
                    dist[t as usize] += (c as f64 - self.discount).max(0.0) / total;
                }
            }
        }
        ProbDist::from_vec_unchecked(dist)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let tables = self
            .tables
            .iter()
            .map(|t| {
                let mut entries: Vec<(Vec<TokenId>, ContextStats)> =
                    t.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                entries.sort_by(|a, b| a.0.cmp(&b.0));
                entries
            })
            .collect();
        let body = ModelFile {
            order: self.order,
            discount: self.discount,
            tokenizer: self.tokenizer.mode().as_str().to_string(),
            vocab: self.vocab().regular_tokens().to_vec(),
            tables,
        };
        writeln!(w, "{MAGIC} {FORMAT_VERSION}")?;
        serde_json::to_writer(&mut *w, &body)?;
        writeln!(w)
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::ModelFormat("not an n-gram model file".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::ModelFormat("missing version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mut body = String::new();
        r.read_to_string(&mut body)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        let file: ModelFile = serde_json::from_str(&body).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if file.tables.len() != file.order || file.order == 0 {
            return Err(Error::ModelFormat("table count does not match order".into()));
        }
        let mode = file.tokenizer.parse()?;
        Ok(Self {
            order: file.order,
            discount: file.discount,
            tokenizer: Tokenizer::new(mode, Vocab::from_tokens(file.vocab)),
            tables: file
                .tables
                .into_iter()
                .map(|entries| entries.into_iter().collect())
                .collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    order: usize,
    discount: f64,
    tokenizer: String,
    vocab: Vec<String>,
    tables: Vec<Vec<(Vec<TokenId>, ContextStats)>>,
}

fn pad(seq: &[TokenId], order: usize) -> Vec<TokenId> {
    let mut padded = vec![BOS; order - 1];
    padded.extend_from_slice(seq);
    padded
}

impl LanguageModel for NGramLM {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        Ok(self.distribution(context))
    }

    fn token_log_probs(&self, context: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        let mut ctx = context.to_vec();
        let mut out = Vec::with_capacity(response.len());
        for &t in response {
            out.push(self.prob(&ctx, t).ln());
            ctx.push(t);
        }
        Ok(out)
    }
}
