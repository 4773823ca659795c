//! Fixed token vocabulary shared by the toy world and the model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const KINDS: [&str; 12] = [
    "dog", "frisbee", "cat", "car", "cube", "ball", "tree", "bench", "cup", "book", "bird", "kite",
];
pub const COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const SPATIAL: [&str; 4] = ["top", "bottom", "left", "right"];
pub const FUNCTION_WORDS: [&str; 7] = ["a", "the", "is", "there", "and", "i", "at"];
pub const CONTENT_WORDS: [&str; 6] = ["describe", "scene", "see", "yes", "no", "?"];

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const EOS: &str = "<eos>";
pub const MASK: &str = "[MASK]";
pub const INDUCE: &str = "[INDUCE]";
/// Sentence separator.
pub const SEP: &str = ".";
pub const EMPTY: &str = "EMPTY";

pub type TokenId = usize;

/// Lexical role of a word, used by scorers and hallucination checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WordClass {
    Kind(usize),
    Color(usize),
    Spatial(usize),
    Function,
    Content,
    /// Tags, separators and reserved control tokens.
    Control,
    /// One-cell scene token.
    Visual,
}

/// Visual token for an object of `kind` and `color`, e.g. `DOG_RED`.
pub fn visual_token(kind: usize, color: usize) -> String {
    format!("{}_{}", KINDS[kind].to_uppercase(), COLORS[color].to_uppercase())
}

pub fn kind_index(word: &str) -> Option<usize> {
    KINDS.iter().position(|k| *k == word)
}

pub fn color_index(word: &str) -> Option<usize> {
    COLORS.iter().position(|c| *c == word)
}

pub fn spatial_index(word: &str) -> Option<usize> {
    SPATIAL.iter().position(|s| *s == word)
}

pub fn word_class(word: &str) -> WordClass {
    if let Some(k) = kind_index(word) {
        WordClass::Kind(k)
    } else if let Some(c) = color_index(word) {
        WordClass::Color(c)
    } else if let Some(s) = spatial_index(word) {
        WordClass::Spatial(s)
    } else if FUNCTION_WORDS.contains(&word) {
        WordClass::Function
    } else if CONTENT_WORDS.contains(&word) {
        WordClass::Content
    } else if word == EMPTY || word.contains('_') {
        WordClass::Visual
    } else {
        WordClass::Control
    }
}

/// Word ↔ id table. Construction order is fixed, so ids are stable.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut words: Vec<String> = [
            THINK_OPEN,
            THINK_CLOSE,
            ANSWER_OPEN,
            ANSWER_CLOSE,
            EOS,
            MASK,
            INDUCE,
            SEP,
            EMPTY,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for k in 0..KINDS.len() {
            for c in 0..COLORS.len() {
                words.push(visual_token(k, c));
            }
        }
        for group in [&KINDS[..], &COLORS[..], &SPATIAL[..], &FUNCTION_WORDS[..], &CONTENT_WORDS[..]] {
            words.extend(group.iter().map(|s| s.to_string()));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownToken {
                id,
                vocab: self.words.len(),
            })
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<TokenId>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.word(i).map(str::to_string)).collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Short digest of the ordered word list; stored in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip_and_reserved_tokens_exist() {
        let v = Vocab::new();
        for w in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, MASK, INDUCE, SEP, EOS] {
            let id = v.id(w).unwrap();
            assert_eq!(v.word(id).unwrap(), w);
        }
        assert_eq!(v.len(), 9 + 48 + 12 + 4 + 4 + 7 + 6);
        assert!(v.word(v.len()).is_err());
    }

    #[test]
    fn word_classes() {
        assert_eq!(word_class("dog"), WordClass::Kind(0));
        assert_eq!(word_class("blue"), WordClass::Color(1));
        assert_eq!(word_class("left"), WordClass::Spatial(2));
        assert_eq!(word_class("the"), WordClass::Function);
        assert_eq!(word_class("see"), WordClass::Content);
        assert_eq!(word_class(SEP), WordClass::Control);
        assert_eq!(word_class("DOG_RED"), WordClass::Visual);
    }
}
