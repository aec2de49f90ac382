//! Seeded generator of topical toy dialogues.
//!
//! Each dialogue stays within one topic. A turn opens with the last content
//! word of the previous turn, and the golden response picks up words of the
//! last turn, so coherence is visible to lexical features. Negatives in the
//! 1:1 output are golden responses of other dialogues.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Conversation, Dataset, Example, Label, Origin, Split, Utterance};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed};

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ne", "su", "ta", "ro", "vi", "pe", "da", "zu", "fo", "gi", "ha", "ju", "be", "no", "ri", "sa",
    "te", "wu", "xo", "yi", "qe",
];
/// Function words; all are in the bundled stopword list.
const FUNCTION_WORDS: [&str; 12] = ["the", "is", "and", "to", "of", "it", "that", "so", "but", "we", "you", "i"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub dialogues: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Content words per turn (function words are added on top).
    pub min_words: usize,
    pub max_words: usize,
    pub split: Split,
    pub seed: u64,
    /// Seeds the topic vocabularies; splits that share it share words.
    pub vocab_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dialogues: 500,
            topics: 6,
            words_per_topic: 30,
            min_turns: 3,
            max_turns: 7,
            min_words: 3,
            max_words: 6,
            split: Split::Train,
            seed: 0,
            vocab_seed: 0,
        }
    }
}

/// One generated dialogue before negatives are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub topic: usize,
    pub context: Conversation,
    pub golden: Utterance,
}

/// Topic vocabularies of distinct pseudo-words; identical for equal
/// `(topics, words_per_topic, seed)`.
pub fn topic_vocabularies(topics: usize, words_per_topic: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = rng_from_seed(derive_seed(seed, "vocab", 0));
    let mut seen: HashSet<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    (0..topics)
        .map(|_| {
            let mut words = Vec::with_capacity(words_per_topic);
            while words.len() < words_per_topic {
                let n = rng.random_range(2..=3);
                let w: String = (0..n).map(|_| *SYLLABLES.choose(&mut rng).expect("non-empty")).collect();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            words
        })
        .collect()
}

fn sentence(rng: &mut ChaCha8Rng, lead: Option<&str>, content: &[&str]) -> String {
    let mut out: Vec<&str> = Vec::new();
    if let Some(l) = lead {
        out.push(l);
    }
    for w in content {
        if rng.random_bool(0.3) {
            out.push(FUNCTION_WORDS.choose(rng).expect("non-empty"));
        }
        out.push(w);
    }
    out.join(" ")
}

fn dialogue(cfg: &SyntheticConfig, vocab: &[Vec<String>], index: usize) -> Result<Dialogue> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "dialogue", index as u64));
    let topic = rng.random_range(0..cfg.topics);
    let words = &vocab[topic];
    let pick = |rng: &mut ChaCha8Rng| -> Vec<&str> {
        let k = rng.random_range(cfg.min_words..=cfg.max_words);
        (0..k).map(|_| words.choose(rng).expect("non-empty").as_str()).collect()
    };
    let n = rng.random_range(cfg.min_turns..=cfg.max_turns);
    let mut turns = Vec::with_capacity(n);
    let mut last_content: Vec<&str> = Vec::new();
    for _ in 0..n {
        let content = pick(&mut rng);
        let lead = last_content.last().copied();
        turns.push(sentence(&mut rng, lead, &content));
        last_content = content;
    }
    // The golden response opens with the last content word of the final
    // turn and repeats another of its words.
    let mut reply: Vec<&str> = vec![last_content[rng.random_range(0..last_content.len())]];
    reply.extend(pick(&mut rng).into_iter().take(2));
    let golden = sentence(&mut rng, last_content.last().copied(), &reply);
    Ok(Dialogue {
        topic,
        context: Conversation::from_texts(format!("{}:{}", cfg.split.as_str(), index + 1), &turns)?,
        golden: Utterance::new(golden)?,
    })
}

/// Generates `cfg.dialogues` dialogues.
pub fn dialogues(cfg: &SyntheticConfig) -> Result<Vec<Dialogue>> {
    if cfg.dialogues < 2 || cfg.topics == 0 || cfg.words_per_topic == 0 {
        return Err(Error::Config("need at least 2 dialogues, 1 topic and 1 word per topic".into()));
    }
    if cfg.min_turns == 0 || cfg.min_turns > cfg.max_turns || cfg.min_words == 0 || cfg.min_words > cfg.max_words {
        return Err(Error::Config("invalid turn or word range".into()));
    }
    let vocab = topic_vocabularies(cfg.topics, cfg.words_per_topic, cfg.vocab_seed);
    (0..cfg.dialogues).map(|i| dialogue(cfg, &vocab, i)).collect()
}

/// A 1:1 dataset: each context with its golden response and the golden
/// response of a random other dialogue.
pub fn one_to_one(cfg: &SyntheticConfig) -> Result<Dataset> {
    let ds = dialogues(cfg)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "negatives", 0));
    let mut examples = Vec::with_capacity(2 * ds.len());
    for (i, d) in ds.iter().enumerate() {
        let mut j = rng.random_range(0..ds.len() - 1);
        if j >= i {
            j += 1;
        }
        examples.push(Example {
            context: d.context.clone(),
            response: d.golden.clone(),
            label: Label::Positive,
            origin: Origin::Golden,
        });
        examples.push(Example {
            context: d.context.clone(),
            response: ds[j].golden.clone(),
            label: Label::Negative,
            origin: Origin::Random,
        });
    }
    Ok(Dataset::new(cfg.split, examples))
}
