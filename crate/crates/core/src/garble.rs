//! Conversation-history garbling.
//!
//! * Flow distortion swaps a random earlier turn `u_i`, `i ∈ [1, N-1]`, with
//!   the last turn `u_N`.
//! * Context destruction replaces the latest two or three turns with
//!   utterances drawn from other conversations, always keeping at least one
//!   original turn.
//!
//! Positions in provenance records are 1-based, matching turn numbering.

use rand::Rng;
use serde::Serialize;

use crate::corpus::{Conversation, UtterancePool};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    FlowDistortion,
    ContextDestruction,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::FlowDistortion => "flow-distortion",
            Strategy::ContextDestruction => "context-destruction",
        }
    }

    /// Minimum number of turns the strategy can garble.
    pub fn min_turns(self) -> usize {
        match self {
            Strategy::FlowDistortion => 2,
            Strategy::ContextDestruction => 3,
        }
    }

    pub fn eligible(self, conv: &Conversation) -> bool {
        conv.len() >= self.min_turns()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Replacement {
    pub position: usize,
    pub source_id: String,
    pub source_turn: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum GarbleRecord {
    FlowDistortion {
        swap_index: usize,
        /// The first draw hit a turn textually equal to `u_N` and was redrawn.
        resampled: bool,
        /// `u_i` and `u_N` are textually equal, so the swap changed nothing.
        no_op: bool,
    },
    ContextDestruction {
        replaced: Vec<Replacement>,
    },
}

impl GarbleRecord {
    pub fn strategy(&self) -> Strategy {
        match self {
            GarbleRecord::FlowDistortion { .. } => Strategy::FlowDistortion,
            GarbleRecord::ContextDestruction { .. } => Strategy::ContextDestruction,
        }
    }
}

/// A garbled history. Keeps the source conversation id and turn count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GarbledConversation {
    pub conversation: Conversation,
    pub record: GarbleRecord,
}

impl GarbledConversation {
    pub fn strategy(&self) -> Strategy {
        self.record.strategy()
    }
}

fn not_garblable(conv: &Conversation, strategy: Strategy) -> Error {
    Error::NotGarblable {
        id: conv.id().to_string(),
        strategy: strategy.as_str(),
        turns: conv.len(),
        needed: strategy.min_turns(),
    }
}

/// Swaps turn `swap_index` (1-based, `< N`) with the last turn.
pub fn flow_distortion_at(conv: &Conversation, swap_index: usize) -> Result<GarbledConversation> {
    let n = conv.len();
    if n < 2 {
        return Err(not_garblable(conv, Strategy::FlowDistortion));
    }
    if !(1..n).contains(&swap_index) {
        return Err(Error::Invalid(format!("swap index {swap_index} outside 1..{n}")));
    }
    let mut turns = conv.turns().to_vec();
    turns.swap(swap_index - 1, n - 1);
    let no_op = turns[swap_index - 1] == turns[n - 1];
    Ok(GarbledConversation {
        conversation: Conversation::new(conv.id(), turns)?,
        record: GarbleRecord::FlowDistortion {
            swap_index,
            resampled: false,
            no_op,
        },
    })
}

/// Flow distortion with `i` drawn uniformly from `[1, N-1]`. If `u_i`
/// equals `u_N` textually, `i` is redrawn once.
pub fn flow_distortion<R: Rng + ?Sized>(conv: &Conversation, rng: &mut R) -> Result<GarbledConversation> {
    let n = conv.len();
    if n < 2 {
        return Err(not_garblable(conv, Strategy::FlowDistortion));
    }
    let turns = conv.turns();
    let mut i = rng.random_range(1..n);
    let mut resampled = false;
    if turns[i - 1] == turns[n - 1] {
        i = rng.random_range(1..n);
        resampled = true;
    }
    let mut garbled = flow_distortion_at(conv, i)?;
    if let GarbleRecord::FlowDistortion { resampled: r, .. } = &mut garbled.record {
        *r = resampled;
    }
    Ok(garbled)
}

/// Replaces the latest `r` turns with utterances sampled from `pool`
/// (never from `conv` itself). `r` is uniform over {2, 3}, forced to 2 when
/// `N = 3`.
pub fn context_destruction<R: Rng + ?Sized>(
    conv: &Conversation,
    pool: &UtterancePool<'_>,
    rng: &mut R,
) -> Result<GarbledConversation> {
    let n = conv.len();
    if n < 3 {
        return Err(not_garblable(conv, Strategy::ContextDestruction));
    }
    let r = if n == 3 { 2 } else { rng.random_range(2..=3) };
    let mut turns = conv.turns().to_vec();
    let mut replaced = Vec::with_capacity(r);
    for position in n - r + 1..=n {
        let s = pool.sample(rng, conv.id())?;
        turns[position - 1] = s.utterance.clone();
        replaced.push(Replacement {
            position,
            source_id: s.conversation_id.to_string(),
            source_turn: s.turn_index + 1,
        });
    }
    Ok(GarbledConversation {
        conversation: Conversation::new(conv.id(), turns)?,
        record: GarbleRecord::ContextDestruction { replaced },
    })
}
