use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CorpusError, CorpusStore, DatasetSplit, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
/// Separates consecutive comments when they are concatenated into one sequence.
pub const SEP: u32 = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"];

/// Targets longer than this are truncated before EOS is appended.
pub const MAX_TARGET_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The `cap` most frequent comment tokens of the training split (ties
    /// broken lexicographically), after the special tokens.
    pub fn build(store: &CorpusStore, train: &DatasetSplit, cap: usize) -> Result<Self> {
        let comments = store.split_comments(train)?;
        if comments.is_empty() {
            return Err(CorpusError::EmptyTrainingSplit);
        }
        Ok(Self::from_counts(
            comments.iter().flat_map(|c| c.tokens.iter().map(String::as_str)),
            cap,
        ))
    }

    pub fn from_counts<'a, I: IntoIterator<Item = &'a str>>(tokens: I, cap: usize) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            *freq.entry(t).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(cap);
        let list = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_list(list).expect("specials are prepended")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_list(tokens: Vec<String>) -> std::result::Result<Self, String> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary must start with the special tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Encodes a target comment, truncated to [`MAX_TARGET_LEN`] (EOS is added by the models).
    pub fn encode_target<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        let mut ids = self.encode(tokens);
        ids.truncate(MAX_TARGET_LEN);
        ids
    }

    /// Maps ids back to tokens, stopping at EOS and dropping PAD, BOS and SEP.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS && id != SEP)
            .filter_map(|&id| self.token(id).map(str::to_string))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> std::result::Result<Self, String> {
        Self::from_list(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc() -> Vocabulary {
        Vocabulary::from_counts(["a", "b", "c", "a", "b", "a"], 2)
    }

    #[test]
    fn keeps_top_tokens_after_specials() {
        let v = abc();
        assert_eq!(
            v.tokens(),
            &["<pad>", "<unk>", "<bos>", "<eos>", "<sep>", "a", "b"]
        );
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        assert_eq!(abc().encode(&["c"]), vec![UNK]);
    }

    #[test]
    fn in_vocab_round_trip() {
        let v = abc();
        assert_eq!(v.decode(&v.encode(&["a", "b"])), vec!["a", "b"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::from_counts(["z", "y", "x"], 2);
        assert_eq!(&v.tokens()[5..], &["x", "y"]);
    }

    #[test]
    fn decode_skips_specials_and_stops_at_eos() {
        let v = abc();
        assert_eq!(v.decode(&[BOS, 5, PAD, SEP, 6, EOS, 5]), vec!["a", "b"]);
    }

    #[test]
    fn target_is_truncated() {
        let v = abc();
        let long = vec!["a"; 30];
        assert_eq!(v.encode_target(&long).len(), MAX_TARGET_LEN);
    }

    #[test]
    fn list_must_start_with_specials() {
        assert!(Vocabulary::from_list(vec!["a".into()]).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in prop::collection::vec("[a-e]{1,3}", 1..30), cap in 1usize..20) {
            let v = Vocabulary::from_counts(words.iter().map(String::as_str), cap);
            let in_vocab: Vec<&String> = words.iter().filter(|w| v.id(w) != UNK).collect();
            let ids = v.encode(&in_vocab);
            prop_assert_eq!(v.decode(&ids), in_vocab.iter().map(|s| s.to_string()).collect::<Vec<_>>());
            prop_assert!(v.len() <= SPECIALS.len() + cap);
        }
    }
}
