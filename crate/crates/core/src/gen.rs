//! Candidate negative generation.
//!
//! * gen1 decodes freely from a flow-distorted history.
//! * gen2 decodes from a context-destructed history and forces a keyword of
//!   the original history into the response, either spliced in at the step
//!   where the model liked its first token most (`insert`) or as the
//!   response prefix (`start`).
//!
//! Every candidate of a batch gets its own sub-seed derived from the master
//! seed, the conversation id and the candidate index, so batches are
//! reproducible regardless of scheduling.

use serde::Serialize;

use crate::corpus::{Conversation, Origin, UtterancePool};
use crate::error::{Error, Result};
use crate::garble::{context_destruction, flow_distortion, GarbleRecord, GarbledConversation, Strategy};
use crate::keywords::{KeywordCandidate, KeywordExtractor};
use crate::lm::{continue_decode, decode, DecodeParams, LanguageModel, ProbDist, TokenId};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    #[serde(rename = "gen1")]
    Gen1,
    #[serde(rename = "gen2-insert")]
    Gen2Insert,
    #[serde(rename = "gen2-start")]
    Gen2Start,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gen1 => "gen1",
            Method::Gen2Insert => "gen2-insert",
            Method::Gen2Start => "gen2-start",
        }
    }

    pub fn origin(self) -> Origin {
        match self {
            Method::Gen1 => Origin::GeneratedGen1,
            Method::Gen2Insert => Origin::GeneratedGen2Insert,
            Method::Gen2Start => Origin::GeneratedGen2Start,
        }
    }

    pub fn garble_strategy(self) -> Strategy {
        match self {
            Method::Gen1 => Strategy::FlowDistortion,
            Method::Gen2Insert | Method::Gen2Start => Strategy::ContextDestruction,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateResponse {
    pub tokens: Vec<TokenId>,
    pub method: Method,
    /// `None` when generated from the original history.
    pub garble: Option<GarbleRecord>,
    /// The history the candidate was decoded from.
    pub history: Conversation,
    pub keyword: Option<KeywordCandidate>,
    pub keyword_ids: Vec<TokenId>,
    /// 1-based step the keyword was spliced at (gen2-insert only).
    pub insert_step: Option<usize>,
    /// Seed of the decode that produced the candidate.
    pub seed: u64,
}

/// First step (1-based) whose row gives `token` the highest probability.
pub fn insert_step(prob_matrix: &[ProbDist], token: TokenId) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in prob_matrix.iter().enumerate() {
        let p = row.prob(token);
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((i + 1, p));
        }
    }
    best.map(|(i, _)| i)
}

/// Maps a keyword to model token ids; `None` if any token is unknown.
pub fn keyword_ids<L: LanguageModel + ?Sized>(lm: &L, keyword: &KeywordCandidate) -> Option<Vec<TokenId>> {
    let vocab = lm.tokenizer().vocab();
    keyword.tokens.iter().map(|t| vocab.id(t)).collect()
}

/// Unconstrained response to `history`.
pub fn gen1_tokens<L: LanguageModel + ?Sized>(lm: &L, history: &Conversation, params: &DecodeParams) -> Result<Vec<TokenId>> {
    Ok(decode(lm, history, params)?.tokens)
}

/// Decodes `R0`, splices the keyword at the best step and continues.
/// Returns the tokens and the 1-based insert step.
pub fn gen2_insert_tokens<L: LanguageModel + ?Sized>(
    lm: &L,
    history: &Conversation,
    keyword: &[TokenId],
    params: &DecodeParams,
) -> Result<(Vec<TokenId>, usize)> {
    let first = *keyword.first().ok_or_else(|| Error::Invalid("empty keyword".into()))?;
    let r0 = decode(lm, history, params)?;
    let step = insert_step(&r0.prob_matrix, first).unwrap_or(1);
    let mut r1 = r0.tokens[..step - 1].to_vec();
    r1.extend_from_slice(keyword);
    let cont = params.with_seed(derive_seed(params.seed, "continue", 0));
    Ok((continue_decode(lm, history, &r1, &cont)?, step))
}

/// Response forced to start with the keyword.
pub fn gen2_start_tokens<L: LanguageModel + ?Sized>(
    lm: &L,
    history: &Conversation,
    keyword: &[TokenId],
    params: &DecodeParams,
) -> Result<Vec<TokenId>> {
    if keyword.is_empty() {
        return Err(Error::Invalid("empty keyword".into()));
    }
    continue_decode(lm, history, keyword, params)
}

fn require(garbled: &GarbledConversation, strategy: Strategy) -> Result<()> {
    if garbled.strategy() != strategy {
        return Err(Error::Invalid(format!(
            "expected a {} history, got {}",
            strategy.as_str(),
            garbled.strategy().as_str()
        )));
    }
    Ok(())
}

fn require_ids<L: LanguageModel + ?Sized>(lm: &L, keyword: &KeywordCandidate) -> Result<Vec<TokenId>> {
    match keyword_ids(lm, keyword) {
        Some(ids) if !ids.is_empty() => Ok(ids),
        _ => Err(Error::Invalid(format!("keyword {:?} is not in the vocabulary", keyword.tokens))),
    }
}

pub fn gen1<L: LanguageModel + ?Sized>(
    lm: &L,
    garbled: &GarbledConversation,
    params: &DecodeParams,
) -> Result<CandidateResponse> {
    require(garbled, Strategy::FlowDistortion)?;
    Ok(CandidateResponse {
        tokens: gen1_tokens(lm, &garbled.conversation, params)?,
        method: Method::Gen1,
        garble: Some(garbled.record.clone()),
        history: garbled.conversation.clone(),
        keyword: None,
        keyword_ids: Vec::new(),
        insert_step: None,
        seed: params.seed,
    })
}

pub fn gen2_insert<L: LanguageModel + ?Sized>(
    lm: &L,
    garbled: &GarbledConversation,
    keyword: &KeywordCandidate,
    params: &DecodeParams,
) -> Result<CandidateResponse> {
    require(garbled, Strategy::ContextDestruction)?;
    let ids = require_ids(lm, keyword)?;
    let (tokens, step) = gen2_insert_tokens(lm, &garbled.conversation, &ids, params)?;
    Ok(CandidateResponse {
        tokens,
        method: Method::Gen2Insert,
        garble: Some(garbled.record.clone()),
        history: garbled.conversation.clone(),
        keyword: Some(keyword.clone()),
        keyword_ids: ids,
        insert_step: Some(step),
        seed: params.seed,
    })
}

pub fn gen2_start<L: LanguageModel + ?Sized>(
    lm: &L,
    garbled: &GarbledConversation,
    keyword: &KeywordCandidate,
    params: &DecodeParams,
) -> Result<CandidateResponse> {
    require(garbled, Strategy::ContextDestruction)?;
    let ids = require_ids(lm, keyword)?;
    Ok(CandidateResponse {
        tokens: gen2_start_tokens(lm, &garbled.conversation, &ids, params)?,
        method: Method::Gen2Start,
        garble: Some(garbled.record.clone()),
        history: garbled.conversation.clone(),
        keyword: Some(keyword.clone()),
        keyword_ids: ids,
        insert_step: None,
        seed: params.seed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub n_gen1: usize,
    pub n_gen2: usize,
    pub decode: DecodeParams,
    /// Keywords considered for round-robin assignment to gen2 slots.
    pub keyword_top_k: usize,
    /// When false, candidates are decoded from the original history.
    pub garble: bool,
    /// Route gen2 slots that cannot be filled to gen1.
    pub gen1_fallback: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_gen1: 2,
            n_gen2: 2,
            decode: DecodeParams::default(),
            keyword_top_k: 5,
            garble: true,
            gen1_fallback: true,
        }
    }
}

impl GenConfig {
    pub fn batch_size(&self) -> usize {
        self.n_gen1 + self.n_gen2
    }

    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        if self.batch_size() == 0 {
            return Err(Error::Config("batch must contain at least one candidate".into()));
        }
        if self.n_gen2 > 0 && self.keyword_top_k == 0 {
            return Err(Error::Config("gen2 needs keyword-top-k >= 1".into()));
        }
        Ok(())
    }
}

/// What a batch slot will be filled with after eligibility routing.
#[derive(Clone, Debug)]
enum Plan<'k> {
    Gen1,
    Gen2 {
        method: Method,
        keyword: &'k KeywordCandidate,
        ids: Vec<TokenId>,
    },
}

fn plan_batch<'k, L: LanguageModel + ?Sized>(
    lm: &L,
    conv: &Conversation,
    pool: &UtterancePool<'_>,
    keywords: &'k [KeywordCandidate],
    cfg: &GenConfig,
) -> Vec<Plan<'k>> {
    let gen1_ok = !cfg.garble || Strategy::FlowDistortion.eligible(conv);
    let destruct_ok = !cfg.garble || (Strategy::ContextDestruction.eligible(conv) && pool.available(conv.id()) > 0);
    let usable: Vec<(&KeywordCandidate, Vec<TokenId>)> = keywords
        .iter()
        .filter_map(|k| keyword_ids(lm, k).map(|ids| (k, ids)))
        .collect();

    let mut plans = Vec::with_capacity(cfg.batch_size());
    plans.extend((0..cfg.n_gen1).filter(|_| gen1_ok).map(|_| Plan::Gen1));
    for slot in 0..cfg.n_gen2 {
        if destruct_ok && !usable.is_empty() {
            let (keyword, ids) = &usable[slot % usable.len()];
            let method = if slot % 2 == 0 { Method::Gen2Insert } else { Method::Gen2Start };
            plans.push(Plan::Gen2 {
                method,
                keyword,
                ids: ids.clone(),
            });
        } else if cfg.gen1_fallback && gen1_ok {
            plans.push(Plan::Gen1);
        }
    }
    plans
}

fn realize<L: LanguageModel + ?Sized>(
    lm: &L,
    conv: &Conversation,
    pool: &UtterancePool<'_>,
    plan: &Plan<'_>,
    cfg: &GenConfig,
    cand_seed: u64,
) -> Result<Option<CandidateResponse>> {
    let strategy = match plan {
        Plan::Gen1 => Strategy::FlowDistortion,
        Plan::Gen2 { .. } => Strategy::ContextDestruction,
    };
    let (history, garble) = if cfg.garble {
        let mut rng = rng_from_seed(derive_seed(cand_seed, "garble", 0));
        let g = match strategy {
            Strategy::FlowDistortion => flow_distortion(conv, &mut rng)?,
            Strategy::ContextDestruction => context_destruction(conv, pool, &mut rng)?,
        };
        (g.conversation, Some(g.record))
    } else {
        (conv.clone(), None)
    };

    // A degenerate (empty) decode is retried once with a bumped seed.
    for attempt in 0..2 {
        let params = cfg.decode.with_seed(derive_seed(cand_seed, "decode", attempt));
        let (tokens, method, insert_step, keyword, ids) = match plan {
            Plan::Gen1 => (gen1_tokens(lm, &history, &params)?, Method::Gen1, None, None, Vec::new()),
            Plan::Gen2 { method, keyword, ids } => {
                let (tokens, step) = match method {
                    Method::Gen2Insert => {
                        let (t, s) = gen2_insert_tokens(lm, &history, ids, &params)?;
                        (t, Some(s))
                    }
                    _ => (gen2_start_tokens(lm, &history, ids, &params)?, None),
                };
                (tokens, *method, step, Some((*keyword).clone()), ids.clone())
            }
        };
        if tokens.is_empty() {
            continue;
        }
        return Ok(Some(CandidateResponse {
            tokens,
            method,
            garble,
            history,
            keyword,
            keyword_ids: ids,
            insert_step,
            seed: params.seed,
        }));
    }
    Ok(None)
}

/// Generates up to `cfg.batch_size()` candidates for `conv`.
///
/// gen1 slots come first, then gen2 slots alternating insert and start with
/// keywords assigned round-robin. A gen2 slot that cannot be filled (history
/// too short to destruct, no usable keyword) becomes a gen1 slot when
/// `cfg.gen1_fallback` is set. A conversation that no strategy can garble
/// yields an empty batch.
pub fn generate_batch<L: LanguageModel + ?Sized>(
    lm: &L,
    conv: &Conversation,
    pool: &UtterancePool<'_>,
    extractor: &KeywordExtractor,
    cfg: &GenConfig,
    master_seed: u64,
) -> Result<Vec<CandidateResponse>> {
    cfg.validate()?;
    let keywords = if cfg.n_gen2 > 0 {
        extractor.extract(conv, cfg.keyword_top_k)
    } else {
        Vec::new()
    };
    let plans = plan_batch(lm, conv, pool, &keywords, cfg);
    let mut out = Vec::with_capacity(plans.len());
    for (j, plan) in plans.iter().enumerate() {
        let cand_seed = derive_seed(master_seed, conv.id(), j as u64);
        if let Some(c) = realize(lm, conv, pool, plan, cfg, cand_seed)? {
            out.push(c);
        }
    }
    Ok(out)
}
