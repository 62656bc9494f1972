//! Fixed-vocabulary tokenizer for single-word affordance queries.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("empty query text")]
    Empty,
    #[error("maximum token length must be at least 3, got {0}")]
    TooShort(usize),
    #[error("invalid vocabulary: {0}")]
    BadVocabulary(String),
}

/// Reserved tokens followed by affordance words in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from affordance words; duplicates are merged.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self, TextError> {
        let mut words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        if let Some(bad) = words.iter().find(|w| w.is_empty() || RESERVED.contains(&w.as_str())) {
            return Err(TextError::BadVocabulary(format!("word `{bad}` is not allowed")));
        }
        words.sort();
        words.dedup();
        let tokens = RESERVED.iter().map(|s| s.to_string()).chain(words).collect();
        Ok(Vocabulary { tokens })
    }

    /// Total vocabulary size `V`, reserved tokens included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.tokens[RESERVED.len()..]
            .binary_search_by(|t| t.as_str().cmp(word))
            .ok()
            .map(|i| (i + RESERVED.len()) as u32)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Affordance words in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.id(word).is_some()
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.words().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let words = Vec::<String>::deserialize(d)?;
        let vocab = Vocabulary::from_words(&words).map_err(serde::de::Error::custom)?;
        if vocab.words() != words.as_slice() {
            return Err(serde::de::Error::custom("vocabulary words must be sorted and unique"));
        }
        Ok(vocab)
    }
}

/// Token ids padded to a fixed length, with the matching attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<bool>,
}

impl TokenizedText {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The `V×L` one-hot indicator matrix, row-major.
    pub fn one_hot(&self, vocab_size: usize) -> Vec<u8> {
        let l = self.ids.len();
        let mut out = vec![0u8; vocab_size * l];
        for (pos, &id) in self.ids.iter().enumerate() {
            if (id as usize) < vocab_size {
                out[id as usize * l + pos] = 1;
            }
        }
        out
    }
}

/// `[CLS, id(word), SEP, PAD…]`; unknown words map to `UNK`.
pub fn tokenize(word: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedText, TextError> {
    let word = word.trim();
    if word.is_empty() {
        return Err(TextError::Empty);
    }
    if max_len < 3 {
        return Err(TextError::TooShort(max_len));
    }
    let mut ids = vec![PAD; max_len];
    ids[0] = CLS;
    ids[1] = vocab.id(word).unwrap_or(UNK);
    ids[2] = SEP;
    let attention_mask = ids.iter().map(|&i| i != PAD).collect();
    Ok(TokenizedText { ids, attention_mask })
}

/// Joins the non-reserved tokens of a sequence.
pub fn detokenize(tokens: &TokenizedText, vocab: &Vocabulary) -> String {
    tokens
        .ids
        .iter()
        .filter(|&&id| id > UNK)
        .filter_map(|&id| vocab.token(id))
        .collect::<Vec<_>>()
        .join(" ")
}
