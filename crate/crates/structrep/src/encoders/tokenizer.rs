//! Whitespace tokenizer with a fixed lowercase vocabulary and an
//! out-of-vocabulary token at index 0.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub max_len: usize,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.max_len == other.max_len
    }
}

fn split_tokens(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl Tokenizer {
    /// Build the vocabulary from a corpus of sentences. Tokens are sorted so
    /// the id assignment is independent of corpus order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>, max_len: usize) -> Self {
        let mut tokens = BTreeSet::new();
        for s in sentences {
            for t in split_tokens(s) {
                tokens.insert(t);
            }
        }
        let mut vocab = vec![UNK_TOKEN.to_string()];
        vocab.extend(tokens);
        Self::from_vocab(vocab, max_len)
    }

    pub fn from_vocab(vocab: Vec<String>, max_len: usize) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Tokenizer {
            vocab,
            index,
            max_len,
        }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Token ids for a sentence, truncated to `max_len`. The bool reports
    /// whether truncation happened.
    pub fn tokenize(&self, sentence: &str) -> (Vec<usize>, bool) {
        let mut ids: Vec<usize> = split_tokens(sentence)
            .map(|t| self.index.get(&t).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            // Pure-punctuation input still maps to something encodable.
            ids.push(0);
        }
        let truncated = ids.len() > self.max_len;
        if truncated {
            log::warn!(
                "sentence truncated from {} to {} tokens",
                ids.len(),
                self.max_len
            );
            ids.truncate(self.max_len);
        }
        (ids, truncated)
    }

    /// CRC32 of the vocabulary, stored in checkpoints to detect mismatched
    /// tokenizers.
    pub fn vocab_hash(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for t in &self.vocab {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize()
    }
}
