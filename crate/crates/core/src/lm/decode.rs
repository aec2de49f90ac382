//! Top-p decoding that keeps the per-step distribution matrix.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;

use super::{encode_history, nucleus, LanguageModel, ProbDist, TokenId, Vocab, EOS};
use crate::corpus::Conversation;
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    pub top_p: f64,
    /// Upper bound on response length, counting any forced prefix.
    pub max_length: usize,
    /// EOS is masked until the response has this many tokens.
    pub min_length: usize,
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            top_p: 0.9,
            max_length: 30,
            min_length: 2,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top-p {} outside (0, 1]", self.top_p)));
        }
        if self.min_length < 1 || self.min_length > self.max_length {
            return Err(Error::Config(format!(
                "need 1 <= min-length ({}) <= max-length ({})",
                self.min_length, self.max_length
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Generated tokens (EOS excluded) and, for each, the distribution it was
/// sampled from before nucleus filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub prob_matrix: Vec<ProbDist>,
}

/// The model distribution with structural tokens removed: BOS, SEP and UNK
/// always, EOS while the response is shorter than `min_length`.
fn step_distribution<L: LanguageModel + ?Sized>(
    lm: &L,
    context: &[TokenId],
    generated: usize,
    min_length: usize,
) -> Result<ProbDist> {
    let mut probs = lm.next_token_dist(context)?.into_vec();
    for (id, p) in probs.iter_mut().enumerate() {
        let id = id as TokenId;
        let eos_blocked = id == EOS && generated < min_length;
        if (Vocab::is_reserved(id) && id != EOS) || eos_blocked {
            *p = 0.0;
        }
    }
    ProbDist::from_weights(probs)
        .map_err(|_| Error::Invalid("no admissible token left after masking".into()))
}

fn sample_nucleus(row: &ProbDist, top_p: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let keep = nucleus(row, top_p);
    if keep.len() == 1 {
        return keep[0];
    }
    let weights: Vec<f64> = keep.iter().map(|&t| row.prob(t)).collect();
    let idx = WeightedIndex::new(&weights)
        .expect("nucleus weights are positive")
        .sample(rng);
    keep[idx]
}

/// Extends `context` until EOS or until `already + generated` reaches
/// `max_length`.
fn extend<L: LanguageModel + ?Sized>(
    lm: &L,
    mut context: Vec<TokenId>,
    already: usize,
    params: &DecodeParams,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    let mut out = DecodeOutput {
        tokens: Vec::new(),
        prob_matrix: Vec::new(),
    };
    while already + out.tokens.len() < params.max_length {
        let row = step_distribution(lm, &context, already + out.tokens.len(), params.min_length)?;
        let token = sample_nucleus(&row, params.top_p, rng);
        if token == EOS {
            break;
        }
        out.tokens.push(token);
        out.prob_matrix.push(row);
        context.push(token);
    }
    Ok(out)
}

/// Samples a response to `history` token by token with top-p sampling.
pub fn decode<L: LanguageModel + ?Sized>(lm: &L, history: &Conversation, params: &DecodeParams) -> Result<DecodeOutput> {
    decode_context(lm, encode_history(lm.tokenizer(), history), params)
}

/// [`decode`] from an already-encoded context.
pub fn decode_context<L: LanguageModel + ?Sized>(
    lm: &L,
    context: Vec<TokenId>,
    params: &DecodeParams,
) -> Result<DecodeOutput> {
    params.validate()?;
    let mut rng = rng_from_seed(params.seed);
    extend(lm, context, 0, params, &mut rng)
}

/// Completes a response that must begin with `prefix`.
pub fn continue_decode<L: LanguageModel + ?Sized>(
    lm: &L,
    history: &Conversation,
    prefix: &[TokenId],
    params: &DecodeParams,
) -> Result<Vec<TokenId>> {
    params.validate()?;
    if prefix.is_empty() {
        return Err(Error::Invalid("continuation prefix is empty".into()));
    }
    if prefix.last() == Some(&EOS) {
        return Ok(prefix.to_vec());
    }
    let mut context = encode_history(lm.tokenizer(), history);
    context.extend_from_slice(prefix);
    let mut rng = rng_from_seed(params.seed);
    let rest = extend(lm, context, prefix.len(), params, &mut rng)?;
    let mut tokens = prefix.to_vec();
    tokens.extend(rest.tokens);
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Tokenizer, TokenizerMode};
    use crate::lm::SEP;

    /// Deterministic toy model: after token t, token t+1 gets 0.9 of the
    /// mass; after the last regular token EOS does.
    struct Chain(Tokenizer);

    impl Chain {
        fn new() -> Self {
            Chain(Tokenizer::new(
                TokenizerMode::Whitespace,
                Vocab::from_tokens(["a", "b", "c", "d", "e"]),
            ))
        }
    }

    impl LanguageModel for Chain {
        fn tokenizer(&self) -> &Tokenizer {
            &self.0
        }
        fn next_token_dist(&self, ctx: &[TokenId]) -> Result<ProbDist> {
            let v = self.vocab_size();
            let last = *ctx.last().unwrap();
            let next = match last {
                SEP => 4,
                t if (t as usize) + 1 < v => t + 1,
                _ => EOS,
            };
            let mut p = vec![0.1 / (v - 1) as f64; v];
            p[next as usize] = 0.9;
            ProbDist::new(p)
        }
    }

    fn conv() -> Conversation {
        Conversation::from_texts("c", &["x y"]).unwrap()
    }

    #[test]
    fn singleton_nucleus_is_greedy() {
        let lm = Chain::new();
        let params = DecodeParams {
            top_p: 0.5,
            max_length: 30,
            min_length: 1,
            seed: 3,
        };
        let out = decode(&lm, &conv(), &params).unwrap();
        assert_eq!(out.tokens, vec![4, 5, 6, 7, 8]);
        assert_eq!(out.prob_matrix.len(), out.tokens.len());
        for row in &out.prob_matrix {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let lm = Chain::new();
        let params = DecodeParams {
            top_p: 1.0,
            seed: 11,
            ..Default::default()
        };
        let a = decode(&lm, &conv(), &params).unwrap();
        let b = decode(&lm, &conv(), &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn respects_length_bounds() {
        let lm = Chain::new();
        let params = DecodeParams {
            top_p: 1.0,
            max_length: 3,
            min_length: 2,
            seed: 0,
        };
        for seed in 0..200 {
            let out = decode(&lm, &conv(), &params.with_seed(seed)).unwrap();
            assert!((2..=3).contains(&out.tokens.len()), "{:?}", out.tokens);
            assert!(out.tokens.iter().all(|&t| !Vocab::is_reserved(t)));
        }
    }

    #[test]
    fn min_length_masks_eos() {
        let lm = Chain::new();
        let params = DecodeParams {
            top_p: 0.5,
            max_length: 30,
            min_length: 1,
            seed: 0,
        };
        // Prefix [e] is followed by EOS greedily.
        assert_eq!(continue_decode(&lm, &conv(), &[8], &params).unwrap(), vec![8]);
        let forced = DecodeParams { min_length: 2, ..params };
        let out = continue_decode(&lm, &conv(), &[8], &forced).unwrap();
        assert!(out.len() >= 2);
        assert_eq!(out[0], 8);
    }

    #[test]
    fn continuation_keeps_prefix() {
        let lm = Chain::new();
        let params = DecodeParams {
            top_p: 0.5,
            ..Default::default()
        };
        assert_eq!(continue_decode(&lm, &conv(), &[6], &params).unwrap(), vec![6, 7, 8]);
        assert_eq!(continue_decode(&lm, &conv(), &[6, EOS], &params).unwrap(), vec![6, EOS]);
        assert!(continue_decode(&lm, &conv(), &[], &params).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let lm = Chain::new();
        for bad in [
            DecodeParams { top_p: 0.0, ..Default::default() },
            DecodeParams { top_p: 1.5, ..Default::default() },
            DecodeParams { min_length: 0, ..Default::default() },
            DecodeParams { min_length: 5, max_length: 4, ..Default::default() },
        ] {
            assert!(matches!(decode(&lm, &conv(), &bad), Err(Error::Config(_))));
        }
    }
}
