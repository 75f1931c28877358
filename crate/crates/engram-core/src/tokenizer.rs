//! Desk-scale word tokenizers.
//!
//! Each encoder stream owns its own tokenizer so streams can disagree on
//! normalization and therefore on how many tokens a trigger phrase spans.
//! Vocabularies are built from a corpus snapshot and are deterministic:
//! ids depend only on the token set, not on corpus order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::registry::TokenSequence;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Normalization options for one stream's tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    /// Lowercase the text before splitting.
    pub lowercase: bool,
    /// Split punctuation characters into their own tokens.
    pub split_punct: bool,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self {
            lowercase: true,
            split_punct: true,
        }
    }
}

/// Word-level tokenizer with a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    vocab: BTreeMap<String, u32>,
    inverse: Vec<String>,
}

impl Tokenizer {
    /// Build a vocabulary from every distinct token in `corpus`.
    ///
    /// Ids 0 and 1 are reserved for padding and unknown tokens; words get
    /// ids from 2 upward in sorted order, so the mapping is invariant under
    /// corpus line order.
    pub fn from_corpus<'a>(corpus: impl IntoIterator<Item = &'a str>, spec: TokenizerSpec) -> Self {
        let mut words = BTreeSet::new();
        for line in corpus {
            for token in split_text(line, spec) {
                words.insert(token);
            }
        }
        let mut vocab = BTreeMap::new();
        let mut inverse = vec!["<pad>".to_string(), "<unk>".to_string()];
        for (offset, word) in words.into_iter().enumerate() {
            vocab.insert(word.clone(), 2 + offset as u32);
            inverse.push(word);
        }
        Self {
            spec,
            vocab,
            inverse,
        }
    }

    pub fn spec(&self) -> TokenizerSpec {
        self.spec
    }

    /// Vocabulary size including the two reserved ids.
    pub fn vocab_size(&self) -> usize {
        self.inverse.len()
    }

    /// Encode text; out-of-vocabulary tokens map to `UNK_ID`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = split_text(text, self.spec)
            .into_iter()
            .map(|tok| self.vocab.get(&tok).copied().unwrap_or(UNK_ID))
            .collect();
        TokenSequence::new(ids)
    }

    /// Token string for an id, if it is in range.
    pub fn decode_id(&self, id: u32) -> Option<&str> {
        self.inverse.get(id as usize).map(String::as_str)
    }
}

/// Split text into surface tokens under `spec`, without vocabulary lookup.
pub fn split_text(text: &str, spec: TokenizerSpec) -> Vec<String> {
    let normalized = if spec.lowercase {
        text.to_lowercase()
    } else {
        text.to_string()
    };
    let mut tokens = Vec::new();
    for word in normalized.split_whitespace() {
        if !spec.split_punct {
            tokens.push(word.to_string());
            continue;
        }
        let mut run = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                run.push(ch);
            } else {
                if !run.is_empty() {
                    tokens.push(std::mem::take(&mut run));
                }
                tokens.push(ch.to_string());
            }
        }
        if !run.is_empty() {
            tokens.push(run);
        }
    }
    tokens
}
