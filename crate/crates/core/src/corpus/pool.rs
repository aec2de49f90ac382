use std::collections::HashMap;

use rand::Rng;

use super::{Conversation, Dataset, Utterance};
use crate::error::{Error, Result};

/// Flat index over the context turns of every distinct conversation in a
/// dataset, supporting uniform draws that exclude one conversation in O(1).
#[derive(Debug, Clone)]
pub struct UtterancePool<'a> {
    conversations: Vec<&'a Conversation>,
    /// `offsets[c]..offsets[c + 1]` are the flat indices of conversation `c`.
    offsets: Vec<usize>,
    by_id: HashMap<&'a str, usize>,
}

/// An utterance drawn from a pool, with its source for provenance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledUtterance<'a> {
    pub utterance: &'a Utterance,
    pub conversation_id: &'a str,
    pub turn_index: usize,
}

impl<'a> UtterancePool<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        let conversations = dataset.conversations();
        let mut offsets = Vec::with_capacity(conversations.len() + 1);
        offsets.push(0);
        let mut by_id = HashMap::with_capacity(conversations.len());
        for (i, c) in conversations.iter().enumerate() {
            offsets.push(offsets[i] + c.len());
            by_id.insert(c.id(), i);
        }
        Self {
            conversations,
            offsets,
            by_id,
        }
    }

    /// Total number of turns in the pool.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of turns that may be drawn when `exclude` is excluded.
    pub fn available(&self, exclude: &str) -> usize {
        self.len() - self.excluded_range(exclude).len()
    }

    fn excluded_range(&self, exclude: &str) -> std::ops::Range<usize> {
        match self.by_id.get(exclude) {
            Some(&c) => self.offsets[c]..self.offsets[c + 1],
            None => 0..0,
        }
    }

    /// Draws a turn uniformly from all conversations except `exclude`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, exclude: &str) -> Result<SampledUtterance<'a>> {
        let skip = self.excluded_range(exclude);
        let available = self.len() - skip.len();
        if available == 0 {
            return Err(Error::NoCandidate {
                exclude: exclude.to_string(),
            });
        }
        let mut flat = rng.random_range(0..available);
        if flat >= skip.start {
            flat += skip.len();
        }
        // Last conversation whose offset is <= flat.
        let conv = self.offsets.partition_point(|&o| o <= flat) - 1;
        let turn_index = flat - self.offsets[conv];
        let c = self.conversations[conv];
        Ok(SampledUtterance {
            utterance: &c.turns()[turn_index],
            conversation_id: c.id(),
            turn_index,
        })
    }
}

/// One-shot draw of a turn from any conversation other than `exclude`.
pub fn sample_utterance<R: Rng + ?Sized>(pool: &Dataset, rng: &mut R, exclude: &str) -> Result<Utterance> {
    UtterancePool::new(pool)
        .sample(rng, exclude)
        .map(|s| s.utterance.clone())
}
