//! Perplexity filtering and assembly of the augmented training set.
//!
//! Candidates are scored against the *original* history. The one with the
//! highest perplexity becomes the new negative if it reaches the threshold
//! `τ`; otherwise a random utterance from another conversation is used.
//! Each context of a 1:1 input gains exactly one negative, so the output is
//! 1.5 times the input with a 1:2 positive/negative ratio.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{ContextGroup, Conversation, Dataset, Example, Label, Origin, Utterance, UtterancePool};
use crate::error::{Error, Result};
use crate::gen::{generate_batch, CandidateResponse, GenConfig};
use crate::garble::GarbleRecord;
use crate::keywords::KeywordExtractor;
use crate::lm::{perplexity, score_sequence, LanguageModel};
use crate::seed::{derive_seed, rng_from_seed};

/// Golden responses used to resolve a quantile threshold.
pub const GOLDEN_SAMPLE_SIZE: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate {
    pub candidate: CandidateResponse,
    pub text: String,
    pub log_prob: f64,
    pub ppl: f64,
}

/// Scores each candidate against `original`, preserving order.
pub fn score_candidates<L: LanguageModel + ?Sized>(
    lm: &L,
    original: &Conversation,
    candidates: Vec<CandidateResponse>,
) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to score".into()));
    }
    candidates
        .into_iter()
        .map(|candidate| {
            let score = score_sequence(lm, original, &candidate.tokens)?;
            Ok(ScoredCandidate {
                text: lm.tokenizer().detokenize(&candidate.tokens),
                log_prob: score.log_prob,
                ppl: perplexity(&score),
                candidate,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThresholdSpec {
    Absolute(f64),
    /// Quantile of golden-response perplexities.
    Quantile(f64),
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::Quantile(0.5)
    }
}

impl fmt::Display for ThresholdSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdSpec::Absolute(v) => write!(f, "{v}"),
            ThresholdSpec::Quantile(q) => write!(f, "q{q}"),
        }
    }
}

impl FromStr for ThresholdSpec {
    type Err = Error;

    /// `"7.5"` is absolute, `"q0.5"` a quantile; `"median"` is `q0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid threshold {s:?}"));
        let spec = if s == "median" {
            ThresholdSpec::Quantile(0.5)
        } else if let Some(q) = s.strip_prefix('q') {
            ThresholdSpec::Quantile(q.parse().map_err(|_| bad())?)
        } else {
            ThresholdSpec::Absolute(s.parse().map_err(|_| bad())?)
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdSpec::Absolute(v) if !(v.is_finite() && v > 0.0) => {
                Err(Error::Config(format!("threshold {v} must be positive")))
            }
            ThresholdSpec::Quantile(q) if !(0.0..=1.0).contains(&q) => {
                Err(Error::Config(format!("quantile {q} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// The `q`-quantile with linear interpolation between order statistics at
/// position `(n - 1) q`.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Perplexities of the first `limit` golden responses of `sample`.
pub fn golden_perplexities<L: LanguageModel + ?Sized>(lm: &L, sample: &Dataset, limit: usize) -> Result<Vec<f64>> {
    sample
        .examples
        .iter()
        .filter(|e| e.label.is_positive())
        .take(limit)
        .map(|e| {
            let tokens = lm.tokenizer().tokenize(e.response.text());
            Ok(perplexity(&score_sequence(lm, &e.context, &tokens)?))
        })
        .collect()
}

pub fn resolve_threshold<L: LanguageModel + ?Sized>(spec: ThresholdSpec, lm: &L, sample: &Dataset) -> Result<f64> {
    spec.validate()?;
    match spec {
        ThresholdSpec::Absolute(v) => Ok(v),
        ThresholdSpec::Quantile(q) => {
            let ppls = golden_perplexities(lm, sample, GOLDEN_SAMPLE_SIZE)?;
            quantile(&ppls, q).ok_or_else(|| Error::Invalid("no golden responses to resolve the threshold".into()))
        }
    }
}

/// Index of the highest perplexity (earliest on ties) if it reaches `tau`.
pub fn choose(ppls: &[f64], tau: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in ppls.iter().enumerate() {
        if best.is_none_or(|b| p > ppls[b]) {
            best = Some(i);
        }
    }
    best.filter(|&b| ppls[b] >= tau)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PoolSource {
    pub conversation_id: String,
    /// 1-based turn.
    pub turn: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub response: Utterance,
    pub origin: Origin,
    pub chosen_index: Option<usize>,
    pub chosen_ppl: Option<f64>,
    pub source: Option<PoolSource>,
    pub batch: Vec<ScoredCandidate>,
}

fn random_negative<R: Rng + ?Sized>(
    pool: &UtterancePool<'_>,
    exclude: &str,
    rng: &mut R,
    origin: Origin,
    batch: Vec<ScoredCandidate>,
) -> Result<SelectionResult> {
    let s = pool.sample(rng, exclude)?;
    Ok(SelectionResult {
        response: s.utterance.clone(),
        origin,
        chosen_index: None,
        chosen_ppl: None,
        source: Some(PoolSource {
            conversation_id: s.conversation_id.to_string(),
            turn: s.turn_index + 1,
        }),
        batch,
    })
}

fn generated(batch: Vec<ScoredCandidate>, index: usize) -> Result<SelectionResult> {
    let chosen = &batch[index];
    Ok(SelectionResult {
        response: Utterance::new(chosen.text.clone())?,
        origin: chosen.candidate.method.origin(),
        chosen_index: Some(index),
        chosen_ppl: Some(chosen.ppl),
        source: None,
        batch,
    })
}

/// Keeps the most implausible candidate if its perplexity reaches `tau`,
/// else samples a random utterance from a conversation other than `exclude`.
pub fn select_negative<R: Rng + ?Sized>(
    scored: Vec<ScoredCandidate>,
    tau: f64,
    pool: &UtterancePool<'_>,
    exclude: &str,
    rng: &mut R,
) -> Result<SelectionResult> {
    let ppls: Vec<f64> = scored.iter().map(|s| s.ppl).collect();
    match choose(&ppls, tau) {
        Some(i) => generated(scored, i),
        None => random_negative(pool, exclude, rng, Origin::FallbackRandom, scored),
    }
}

/// Pipeline variants used to isolate the contribution of each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Generate from the original history.
    NoGarble,
    /// Pick a uniformly random candidate instead of the max-perplexity one.
    NoFilter,
    /// All slots are gen2.
    NoGen1,
    /// All slots are gen1.
    NoGen2,
    /// Skip generation; every new negative is a random utterance.
    RandomDa,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoGarble,
        Ablation::NoFilter,
        Ablation::NoGen1,
        Ablation::NoGen2,
        Ablation::RandomDa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoGarble => "no-garble",
            Ablation::NoFilter => "no-filter",
            Ablation::NoGen1 => "no-gen1",
            Ablation::NoGen2 => "no-gen2",
            Ablation::RandomDa => "random-da",
        }
    }

    /// The batch configuration this variant runs with. The batch size is
    /// unchanged.
    pub fn gen_config(self, base: &GenConfig) -> GenConfig {
        let total = base.batch_size();
        match self {
            Ablation::NoGarble => GenConfig {
                garble: false,
                ..base.clone()
            },
            Ablation::NoGen1 => GenConfig {
                n_gen1: 0,
                n_gen2: total,
                gen1_fallback: false,
                ..base.clone()
            },
            Ablation::NoGen2 => GenConfig {
                n_gen1: total,
                n_gen2: 0,
                ..base.clone()
            },
            _ => base.clone(),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub gen: GenConfig,
    /// Resolved perplexity threshold.
    pub tau: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("threshold {} must be positive", self.tau)));
        }
        self.ablation.gen_config(&self.gen).validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditCandidate {
    pub index: usize,
    pub method: &'static str,
    pub text: String,
    pub ppl: f64,
    pub log_prob: f64,
    pub keyword: Option<Vec<String>>,
    pub insert_step: Option<usize>,
    pub garble: Option<GarbleRecord>,
    pub history: Vec<String>,
    pub seed: u64,
}

impl AuditCandidate {
    pub fn new(index: usize, s: &ScoredCandidate) -> Self {
        Self {
            index,
            method: s.candidate.method.as_str(),
            text: s.text.clone(),
            ppl: s.ppl,
            log_prob: s.log_prob,
            keyword: s.candidate.keyword.as_ref().map(|k| k.tokens.clone()),
            insert_step: s.candidate.insert_step,
            garble: s.candidate.garble.clone(),
            history: s.candidate.history.texts().map(str::to_string).collect(),
            seed: s.candidate.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditSelection {
    pub origin: &'static str,
    pub index: Option<usize>,
    pub ppl: Option<f64>,
    pub text: String,
    pub source: Option<PoolSource>,
}

/// Everything that went into one context's new negative.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRecord {
    pub context_id: String,
    pub tau: f64,
    pub ablation: &'static str,
    pub selection: AuditSelection,
    pub candidates: Vec<AuditCandidate>,
}

impl AuditRecord {
    pub fn new(context_id: &str, cfg: &AugmentConfig, sel: &SelectionResult) -> Self {
        Self {
            context_id: context_id.to_string(),
            tau: cfg.tau,
            ablation: cfg.ablation.as_str(),
            selection: AuditSelection {
                origin: sel.origin.as_str(),
                index: sel.chosen_index,
                ppl: sel.chosen_ppl,
                text: sel.response.text().to_string(),
                source: sel.source.clone(),
            },
            candidates: sel
                .batch
                .iter()
                .enumerate()
                .map(|(index, s)| AuditCandidate::new(index, s))
                .collect(),
        }
    }
}

/// Produces the new negative for one context.
pub fn select_for_context<L: LanguageModel + ?Sized>(
    lm: &L,
    conv: &Conversation,
    pool: &UtterancePool<'_>,
    extractor: &KeywordExtractor,
    cfg: &AugmentConfig,
) -> Result<SelectionResult> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &format!("{}/select", conv.id()), 0));
    if cfg.ablation == Ablation::RandomDa {
        return random_negative(pool, conv.id(), &mut rng, Origin::Random, Vec::new());
    }
    let gen = cfg.ablation.gen_config(&cfg.gen);
    let batch = generate_batch(lm, conv, pool, extractor, &gen, cfg.seed)?;
    if batch.is_empty() {
        return random_negative(pool, conv.id(), &mut rng, Origin::FallbackRandom, Vec::new());
    }
    let scored = score_candidates(lm, conv, batch)?;
    if cfg.ablation == Ablation::NoFilter {
        let i = rng.random_range(0..scored.len());
        return generated(scored, i);
    }
    select_negative(scored, cfg.tau, pool, conv.id(), &mut rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub dataset: Dataset,
    /// One record per context, in dataset order.
    pub audit: Vec<AuditRecord>,
}

fn check_one_to_one(group: &ContextGroup<'_>) -> Result<()> {
    let pos = group.examples.iter().filter(|e| e.label.is_positive()).count();
    let neg = group.examples.len() - pos;
    if pos != 1 || neg != 1 {
        return Err(Error::Invalid(format!(
            "context {} has {pos} positive and {neg} negative examples; augmentation expects exactly one of each",
            group.conversation.id()
        )));
    }
    Ok(())
}

/// Adds one selected negative per context of a 1:1 dataset. Contexts are
/// processed in parallel on the current rayon pool; output order follows
/// the input regardless of scheduling.
pub fn augment_dataset<L: LanguageModel + ?Sized>(
    train: &Dataset,
    lm: &L,
    pool: &UtterancePool<'_>,
    extractor: &KeywordExtractor,
    cfg: &AugmentConfig,
) -> Result<Augmented> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let groups = train.groups();
    for g in &groups {
        check_one_to_one(g)?;
    }
    let selections: Vec<Result<SelectionResult>> = groups
        .par_iter()
        .map(|g| select_for_context(lm, g.conversation, pool, extractor, cfg))
        .collect();

    let mut examples = Vec::with_capacity(train.len() + groups.len());
    let mut audit = Vec::with_capacity(groups.len());
    for (g, sel) in groups.iter().zip(selections) {
        let sel = sel?;
        examples.extend(g.examples.iter().map(|e| (*e).clone()));
        audit.push(AuditRecord::new(g.conversation.id(), cfg, &sel));
        examples.push(Example {
            context: g.conversation.clone(),
            response: sel.response,
            label: Label::Negative,
            origin: sel.origin,
        });
    }
    Ok(Augmented {
        dataset: Dataset::new(train.split, examples),
        audit,
    })
}
