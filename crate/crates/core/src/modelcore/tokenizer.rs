use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{ModelError, TokenId};

pub const BEGIN: TokenId = 0;
pub const END: TokenId = 1;
pub const SEPARATOR: TokenId = 2;
/// First id available to ordinary tokens.
pub const FIRST_WORD: TokenId = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    Whitespace,
    Byte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub max_sequence_length: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self { mode: TokenizerMode::Whitespace, max_sequence_length: 1024 }
    }
}

/// Frozen vocabulary plus encode/decode.
///
/// Whitespace mode maps each whitespace-separated word to an id; the word
/// list is induced once from the corpora and never grows. Byte mode maps
/// each UTF-8 byte to an id and accepts any text.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    spec: TokenizerSpec,
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    truncations: Arc<AtomicUsize>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.words == other.words
    }
}

impl Tokenizer {
    /// Build a tokenizer whose vocabulary covers every word in `texts`.
    pub fn induce<'a>(spec: TokenizerSpec, texts: impl IntoIterator<Item = &'a str>) -> Self {
        match spec.mode {
            TokenizerMode::Byte => Self::from_words(spec, Vec::new()),
            TokenizerMode::Whitespace => {
                let mut set = BTreeSet::new();
                for text in texts {
                    for w in text.split_whitespace() {
                        if !set.contains(w) {
                            set.insert(w.to_owned());
                        }
                    }
                }
                Self::from_words(spec, set.into_iter().collect())
            }
        }
    }

    /// Rebuild from a stored word list (ignored in byte mode).
    pub fn from_words(spec: TokenizerSpec, words: Vec<String>) -> Self {
        let words = match spec.mode {
            TokenizerMode::Byte => Vec::new(),
            TokenizerMode::Whitespace => words,
        };
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD + i as TokenId))
            .collect();
        Self { spec, words, index, truncations: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn spec(&self) -> TokenizerSpec {
        self.spec
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Number of ordinary (non-special) tokens.
    pub fn word_count(&self) -> usize {
        match self.spec.mode {
            TokenizerMode::Byte => 256,
            TokenizerMode::Whitespace => self.words.len(),
        }
    }

    /// How many sequences were cut at `max_sequence_length` so far.
    pub fn truncation_count(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Token count before truncation.
    pub fn token_len(&self, text: &str) -> Result<usize, ModelError> {
        Ok(self.encode_full(text)?.len())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        let mut ids = self.encode_full(text)?;
        let limit = self.spec.max_sequence_length;
        if ids.len() > limit {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            log::warn!("sequence of {} tokens truncated to {limit}", ids.len());
            ids.truncate(limit);
        }
        Ok(ids)
    }

    fn encode_full(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        match self.spec.mode {
            TokenizerMode::Byte => Ok(text.bytes().map(|b| FIRST_WORD + b as TokenId).collect()),
            TokenizerMode::Whitespace => text
                .split_whitespace()
                .map(|w| self.index.get(w).copied().ok_or_else(|| ModelError::Untokenizable(w.to_owned())))
                .collect(),
        }
    }

    /// Special tokens are skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words = ids.iter().filter(|&&id| id >= FIRST_WORD).map(|&id| (id - FIRST_WORD) as usize);
        match self.spec.mode {
            TokenizerMode::Byte => {
                let bytes: Vec<u8> = words.filter(|&b| b < 256).map(|b| b as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            TokenizerMode::Whitespace => words
                .filter_map(|i| self.words.get(i).map(String::as_str))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ws(texts: &[&str]) -> Tokenizer {
        Tokenizer::induce(TokenizerSpec::default(), texts.iter().copied())
    }

    #[test]
    fn induced_vocabulary_is_sorted_and_frozen() {
        let t = ws(&["b a", "c a"]);
        assert_eq!(t.words(), ["a", "b", "c"]);
        assert_eq!(t.encode("a c").unwrap(), vec![3, 5]);
        assert_eq!(t.encode("zzz"), Err(ModelError::Untokenizable("zzz".into())));
    }

    #[test]
    fn truncation_is_counted() {
        let spec = TokenizerSpec { mode: TokenizerMode::Whitespace, max_sequence_length: 2 };
        let t = Tokenizer::induce(spec, ["a b c"]);
        assert_eq!(t.encode("a b c").unwrap().len(), 2);
        assert_eq!(t.token_len("a b c").unwrap(), 3);
        assert_eq!(t.truncation_count(), 1);
        t.encode("a b").unwrap();
        assert_eq!(t.truncation_count(), 1);
    }

    proptest! {
        #[test]
        fn byte_mode_round_trips(text in "\\PC{0,64}") {
            let t = Tokenizer::from_words(TokenizerSpec { mode: TokenizerMode::Byte, max_sequence_length: 1024 }, vec![]);
            prop_assert_eq!(t.decode(&t.encode(&text).unwrap()), text);
        }

        #[test]
        fn whitespace_mode_round_trips_normalized_text(words in proptest::collection::vec("[a-z]{1,5}", 1..20)) {
            let text = words.join(" ");
            let t = Tokenizer::induce(TokenizerSpec::default(), [text.as_str()]);
            prop_assert_eq!(t.decode(&t.encode(&text).unwrap()), text);
        }
    }
}
