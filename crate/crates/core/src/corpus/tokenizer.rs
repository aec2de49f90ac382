use std::collections::HashMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lm::{TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TokenizerMode {
    /// Split on Unicode whitespace.
    #[default]
    Whitespace,
    /// One token per non-whitespace character; for unsegmented scripts.
    Character,
}

impl TokenizerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenizerMode::Whitespace => "whitespace",
            TokenizerMode::Character => "character",
        }
    }

    /// Splits text into token strings.
    pub fn split(self, text: &str) -> Vec<&str> {
        match self {
            TokenizerMode::Whitespace => text.split_whitespace().collect(),
            TokenizerMode::Character => text
                .char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, c)| &text[i..i + c.len_utf8()])
                .collect(),
        }
    }

    pub fn join(self, pieces: &[&str]) -> String {
        match self {
            TokenizerMode::Whitespace => pieces.join(" "),
            TokenizerMode::Character => pieces.concat(),
        }
    }
}

impl FromStr for TokenizerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "whitespace" => Ok(TokenizerMode::Whitespace),
            "character" | "char" => Ok(TokenizerMode::Character),
            other => Err(Error::Invalid(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

/// Maps text to token ids through a [`Vocab`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vocab,
}

impl Tokenizer {
    pub fn new(mode: TokenizerMode, vocab: Vocab) -> Self {
        Self { mode, vocab }
    }

    /// Builds the vocabulary from `texts`, ordering tokens by descending
    /// frequency and then lexicographically.
    pub fn fit<'a, I>(mode: TokenizerMode, texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for text in texts {
            for piece in mode.split(text) {
                *freq.entry(piece).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, u64)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::new(mode, Vocab::from_tokens(entries.into_iter().map(|(t, _)| t)))
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        self.mode
            .split(text)
            .into_iter()
            .map(|p| self.vocab.id_or_unk(p))
            .collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .map(|&id| self.vocab.token(id).unwrap_or("<unk>"))
            .collect();
        self.mode.join(&pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::UNK;

    #[test]
    fn whitespace_lookup() {
        let t = Tokenizer::new(TokenizerMode::Whitespace, Vocab::from_tokens(["a", "b"]));
        let a = t.vocab().id("a").unwrap();
        let b = t.vocab().id("b").unwrap();
        assert_eq!(t.tokenize("a b a"), vec![a, b, a]);
        assert_eq!(t.tokenize("a xyzzy"), vec![a, UNK]);
    }

    #[test]
    fn character_mode_splits_per_char() {
        let t = Tokenizer::fit(TokenizerMode::Character, ["ab", "纯棉"]);
        assert_eq!(t.tokenize("ab").len(), 2);
        assert_eq!(t.tokenize("纯 棉").len(), 2);
        assert_eq!(t.detokenize(&t.tokenize("纯棉")), "纯棉");
    }

    #[test]
    fn round_trip_normalizes_whitespace() {
        let t = Tokenizer::fit(TokenizerMode::Whitespace, ["hello   there\tfriend"]);
        let ids = t.tokenize("  hello there   friend ");
        assert_eq!(t.detokenize(&ids), "hello there friend");
    }

    #[test]
    fn fit_orders_by_frequency() {
        let t = Tokenizer::fit(TokenizerMode::Whitespace, ["b a b", "c b a"]);
        assert_eq!(t.vocab().regular_tokens(), ["b", "a", "c"]);
    }

    #[test]
    fn nonempty_text_gives_nonempty_ids() {
        let t = Tokenizer::fit(TokenizerMode::Whitespace, ["x"]);
        assert!(!t.tokenize("unknown words").is_empty());
    }
}
