use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;
/// First id available to ordinary tokens.
pub const FIRST_WORD_ID: u32 = 5;

const RESERVED: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// Whitespace vocabulary with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut v = Self {
            words,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Builds a vocabulary from texts. Ids are assigned in order of first
    /// appearance, every observed word is kept.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                if !index.contains_key(w) {
                    index.insert(w.to_string(), FIRST_WORD_ID + words.len() as u32);
                    words.push(w.to_string());
                }
            }
        }
        Self { words, index }
    }

    /// Vocabulary with exactly these words, in order.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        Self::build(words.iter().map(|w| w.as_ref()))
    }

    pub fn len(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        if id < FIRST_WORD_ID {
            RESERVED.get(id as usize).copied()
        } else {
            self.words
                .get((id - FIRST_WORD_ID) as usize)
                .map(String::as_str)
        }
    }

    pub fn is_special(id: u32) -> bool {
        id < FIRST_WORD_ID && id != UNK
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
    }
}

/// Ordered token ids. Padding, if any, only occurs as a trailing run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(first_pad) = ids.iter().position(|&t| t == PAD) {
            if ids[first_pad..].iter().any(|&t| t != PAD) {
                return Err(Error::invalid("[PAD] before a non-pad token"));
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Prefix before the first [PAD].
    pub fn unpadded(&self) -> &[u32] {
        let end = self.0.iter().position(|&t| t == PAD).unwrap_or(self.0.len());
        &self.0[..end]
    }

    /// Non-special tokens only.
    pub fn content(&self) -> Vec<u32> {
        self.unpadded()
            .iter()
            .copied()
            .filter(|&t| !Vocab::is_special(t))
            .collect()
    }

    pub fn padded_to(&self, len: usize) -> Self {
        let mut ids = self.0.clone();
        ids.resize(len.max(ids.len()), PAD);
        Self(ids)
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

/// Splits on whitespace and maps words to ids; unknown words become [UNK].
/// With `add_specials`, a [CLS] is prepended.
pub fn tokenize(text: &str, vocab: &Vocab, add_specials: bool) -> TokenSequence {
    let mut ids = Vec::new();
    if add_specials {
        ids.push(CLS);
    }
    ids.extend(text.split_whitespace().map(|w| vocab.id(w)));
    TokenSequence(ids)
}

/// Inverse of [`tokenize`] on whitespace-normalized text: special tokens
/// other than [UNK] are dropped.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocab) -> String {
    seq.unpadded()
        .iter()
        .filter(|&&t| !Vocab::is_special(t))
        .filter_map(|&t| vocab.word(t))
        .collect::<Vec<_>>()
        .join(" ")
}
