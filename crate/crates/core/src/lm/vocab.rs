use std::collections::HashMap;

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

const RESERVED: [&str; 4] = ["<unk>", "<s>", "</s>", "<sep>"];

/// Token/id bijection. Ids `0..4` are reserved for `<unk>`, `<s>`, `</s>`
/// and the turn separator `<sep>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    pub const RESERVED_COUNT: usize = RESERVED.len();

    /// Builds a vocabulary: reserved tokens first, then `tokens` in the given
    /// order with duplicates dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t.to_string());
        }
        for t in tokens {
            v.insert(t.into());
        }
        v
    }

    fn insert(&mut self, token: String) -> TokenId {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn is_reserved_token(token: &str) -> bool {
        RESERVED.contains(&token)
    }

    /// Non-reserved tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}
