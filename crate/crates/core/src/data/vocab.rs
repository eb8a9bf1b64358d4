use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::format::{ABSENT, EOS, SEP_CLOSE, SEP_OPEN, SLOT_END, SLOT_SEP, TRIGGER_CLOSE, TRIGGER_OPEN};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Tokens with fixed ids at the start of every vocabulary.
pub const SPECIALS: [&str; 10] = [
    PAD,
    UNK,
    SEP_OPEN,
    SEP_CLOSE,
    EOS,
    TRIGGER_OPEN,
    TRIGGER_CLOSE,
    ABSENT,
    SLOT_SEP,
    SLOT_END,
];

/// Token ↔ id table. Ordinary tokens follow the specials in sorted order, so
/// the same token set always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const SEP_CLOSE_ID: usize = 3;
    pub const EOS_ID: usize = 4;

    pub fn build<'a, I: IntoIterator<Item = &'a str>>(tokens: I) -> Self {
        let rest: BTreeSet<&str> = tokens.into_iter().filter(|t| !SPECIALS.contains(t)).collect();
        let all: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(rest)
            .map(String::from)
            .collect();
        Self::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocab::build(["zeta", "alpha", "[EOS]", "alpha"]);
        assert_eq!(v.id(PAD), Vocab::PAD_ID);
        assert_eq!(v.id(SEP_OPEN), Vocab::BOS_ID);
        assert_eq!(v.id(EOS), Vocab::EOS_ID);
        assert_eq!(v.len(), SPECIALS.len() + 2);
        assert_eq!(v.id("alpha"), SPECIALS.len());
        assert_eq!(v.id("never-seen"), Vocab::UNK_ID);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(["b", "a"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.decode(&back.encode(&["a", "b"])), vec!["a", "b"]);
    }
}
