//! Multi-turn dialogue datasets: representation, parsing, writing, statistics
//! and random utterance pools.

mod io;
mod pool;
mod tokenizer;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, parse_jsonl, parse_tsv, write_dataset, write_dataset_with_header, Format};
pub use pool::{sample_utterance, SampledUtterance, UtterancePool};
pub use tokenizer::{Tokenizer, TokenizerMode};

/// A single dialogue turn or response. The text is never blank.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Utterance {
    text: String,
}

impl Utterance {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Invalid("utterance text is blank".into()));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

impl<'de> Deserialize<'de> for Utterance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Utterance::new(text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Utterance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// An ordered dialogue history `u_1 .. u_N` with a stable identifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    id: String,
    turns: Vec<Utterance>,
}

impl Conversation {
    pub fn new(id: impl Into<String>, turns: Vec<Utterance>) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::Invalid("conversation needs at least one turn".into()));
        }
        Ok(Self {
            id: id.into(),
            turns,
        })
    }

    /// Convenience constructor from raw turn texts.
    pub fn from_texts<S: AsRef<str>>(id: impl Into<String>, texts: &[S]) -> Result<Self> {
        let turns = texts
            .iter()
            .map(|t| Utterance::new(t.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(id, turns)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turns(&self) -> &[Utterance] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn last(&self) -> &Utterance {
        self.turns.last().expect("conversation has at least one turn")
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.turns.iter().map(Utterance::text)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_int(self) -> u8 {
        match self {
            Label::Positive => 1,
            Label::Negative => 0,
        }
    }

    pub fn from_int(v: u8) -> Option<Self> {
        match v {
            1 => Some(Label::Positive),
            0 => Some(Label::Negative),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }
}

/// Where a response came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Golden,
    Random,
    GeneratedGen1,
    GeneratedGen2Insert,
    GeneratedGen2Start,
    FallbackRandom,
}

impl Origin {
    pub const ALL: [Origin; 6] = [
        Origin::Golden,
        Origin::Random,
        Origin::GeneratedGen1,
        Origin::GeneratedGen2Insert,
        Origin::GeneratedGen2Start,
        Origin::FallbackRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Golden => "golden",
            Origin::Random => "random",
            Origin::GeneratedGen1 => "generated-gen1",
            Origin::GeneratedGen2Insert => "generated-gen2-insert",
            Origin::GeneratedGen2Start => "generated-gen2-start",
            Origin::FallbackRandom => "fallback-random",
        }
    }

    /// Default origin for datasets whose format carries no provenance.
    pub fn for_label(label: Label) -> Self {
        match label {
            Label::Positive => Origin::Golden,
            Label::Negative => Origin::Random,
        }
    }

    pub fn is_generated(self) -> bool {
        matches!(
            self,
            Origin::GeneratedGen1 | Origin::GeneratedGen2Insert | Origin::GeneratedGen2Start
        )
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Origin::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown origin {s:?}")))
    }
}

/// A (context, response, label) triple.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub context: Conversation,
    pub response: Utterance,
    pub label: Label,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
}

/// All examples sharing one conversation id, in file order.
#[derive(Clone, Debug)]
pub struct ContextGroup<'a> {
    pub conversation: &'a Conversation,
    pub examples: Vec<&'a Example>,
}

impl Dataset {
    pub fn new(split: Split, examples: Vec<Example>) -> Self {
        Self { split, examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Groups examples by conversation id, ordered by first appearance.
    pub fn groups(&self) -> Vec<ContextGroup<'_>> {
        let mut index: IndexMap<&str, ContextGroup<'_>> = IndexMap::new();
        for ex in &self.examples {
            index
                .entry(ex.context.id())
                .or_insert_with(|| ContextGroup {
                    conversation: &ex.context,
                    examples: Vec::new(),
                })
                .examples
                .push(ex);
        }
        index.into_values().collect()
    }

    /// Distinct conversations, ordered by first appearance.
    pub fn conversations(&self) -> Vec<&Conversation> {
        self.groups().into_iter().map(|g| g.conversation).collect()
    }
}

/// Corpus statistics in the shape of a dataset summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub dialog_count: usize,
    pub avg_turns: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Positive:negative ratio reduced by the gcd, e.g. `(1, 2)`.
    pub pos_neg_ratio: (usize, usize),
}

/// Dialogue count, mean context length and label ratio.
///
/// Dialogues are distinct conversation ids; the response is not counted as a
/// turn.
pub fn corpus_stats(dataset: &Dataset) -> Result<CorpusStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let convs = dataset.conversations();
    let total_turns: usize = convs.iter().map(|c| c.len()).sum();
    let positives = dataset
        .examples
        .iter()
        .filter(|e| e.label.is_positive())
        .count();
    let negatives = dataset.len() - positives;
    let g = num_integer::gcd(positives, negatives).max(1);
    Ok(CorpusStats {
        dialog_count: convs.len(),
        avg_turns: total_turns as f64 / convs.len() as f64,
        positives,
        negatives,
        pos_neg_ratio: (positives / g, negatives / g),
    })
}
