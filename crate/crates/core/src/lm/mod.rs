//! Language models used for generation and scoring.
//!
//! A dialogue is presented to a model as `BOS u_1 SEP u_2 SEP ... u_N SEP`,
//! followed by the response tokens and, in training, EOS.

mod decode;
mod dist;
mod external;
mod ngram;
mod vocab;

pub use decode::{continue_decode, decode, decode_context, DecodeOutput, DecodeParams};
pub use dist::{nucleus, ranked_tokens, top_p_filter, ProbDist, NUCLEUS_EPS};
pub use external::ExternalLm;
pub use ngram::{train_ngram, train_ngram_with_tokenizer, NGramLM, DEFAULT_DISCOUNT, DEFAULT_ORDER};
pub use vocab::{TokenId, Vocab, BOS, EOS, SEP, UNK};

use crate::corpus::{Conversation, Tokenizer};
use crate::error::{Error, Result};

/// Interface shared by the built-in n-gram model and external models.
pub trait LanguageModel: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;

    /// Distribution of the next token given `context`. Must cover the whole
    /// vocabulary.
    fn next_token_dist(&self, context: &[TokenId]) -> Result<ProbDist>;

    /// Natural-log probability of each response token given the context and
    /// the preceding response tokens.
    fn token_log_probs(&self, context: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        let mut ctx = context.to_vec();
        let mut out = Vec::with_capacity(response.len());
        for &t in response {
            out.push(self.next_token_dist(&ctx)?.prob(t).ln());
            ctx.push(t);
        }
        Ok(out)
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer().vocab().len()
    }
}

impl<L: LanguageModel + ?Sized> LanguageModel for &L {
    fn tokenizer(&self) -> &Tokenizer {
        (**self).tokenizer()
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        (**self).next_token_dist(context)
    }

    fn token_log_probs(&self, context: &[TokenId], response: &[TokenId]) -> Result<Vec<f64>> {
        (**self).token_log_probs(context, response)
    }
}

/// Encodes a history as `BOS u_1 SEP ... u_N SEP`.
pub fn encode_history(tokenizer: &Tokenizer, history: &Conversation) -> Vec<TokenId> {
    let mut ids = vec![BOS];
    for turn in history.turns() {
        ids.extend(tokenizer.tokenize(turn.text()));
        ids.push(SEP);
    }
    ids
}

/// Encodes a full training sequence `BOS u_1 SEP ... SEP response EOS`.
pub fn encode_training_sequence(tokenizer: &Tokenizer, history: &Conversation, response: &[TokenId]) -> Vec<TokenId> {
    let mut ids = encode_history(tokenizer, history);
    ids.extend_from_slice(response);
    ids.push(EOS);
    ids
}

/// Log-likelihood of a response, kept per token.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceScore {
    pub log_prob: f64,
    pub token_log_probs: Vec<f64>,
}

impl SequenceScore {
    pub fn from_token_log_probs(token_log_probs: Vec<f64>) -> Result<Self> {
        if token_log_probs.is_empty() {
            return Err(Error::EmptyResponse);
        }
        Ok(Self {
            log_prob: token_log_probs.iter().sum(),
            token_log_probs,
        })
    }

    /// Response length `K`.
    pub fn len(&self) -> usize {
        self.token_log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_log_probs.is_empty()
    }
}

/// `log P(response | history)` as a sum of per-token conditional log
/// probabilities. The product form underflows for modest lengths, so
/// everything stays in the log domain.
pub fn score_sequence<L: LanguageModel + ?Sized>(
    lm: &L,
    history: &Conversation,
    response: &[TokenId],
) -> Result<SequenceScore> {
    if response.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let ctx = encode_history(lm.tokenizer(), history);
    SequenceScore::from_token_log_probs(lm.token_log_probs(&ctx, response)?)
}

/// Perplexity `P(R|C)^(-1/K) = exp(-log P / K)`.
pub fn perplexity(score: &SequenceScore) -> f64 {
    assert!(!score.is_empty(), "perplexity of an empty response");
    (-score.log_prob / score.len() as f64).exp()
}
