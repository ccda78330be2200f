//! Word-level tokenizer over the closed synthetic vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::data;
use crate::error::{Error, Result};

pub const TOK_BOS: usize = 0;
pub const TOK_EOS: usize = 1;
pub const TOK_CTX: usize = 2;
pub const TOK_Q: usize = 3;
pub const TOK_A: usize = 4;

const SPECIALS: [&str; 5] = ["[BOS]", "[EOS]", "[CTX]", "[Q:]", "[A:]"];

/// Closed vocabulary: five specials first, then every generator word in
/// sorted order so construction is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build() -> Self {
        let mut pool: BTreeSet<&str> = BTreeSet::new();
        pool.extend(data::FIRST_NAMES);
        pool.extend(data::LAST_NAMES);
        pool.extend(data::MONTHS);
        pool.extend(data::OCCUPATIONS);
        pool.extend(data::FILLER_WORDS);
        for city in data::CITIES {
            pool.extend(city.iter().copied());
        }
        for inst in data::INSTITUTIONS {
            pool.extend(inst.iter().copied());
        }
        for needle in data::needle_pool() {
            pool.extend(needle);
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend((1..=data::N_DAYS).map(|d| d.to_string()));
        words.extend((data::YEAR_MIN..=data::YEAR_MAX).map(|y| y.to_string()));
        words.extend(pool.into_iter().map(|s| s.to_string()));
        Self::from_words(words)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    /// Rebuilds the word -> id index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words.get(id).map(|s| s.as_str()).ok_or(Error::TokenOutOfRange {
            id,
            vocab_size: self.words.len(),
        })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words: Result<Vec<&str>> = ids.iter().map(|&id| self.word(id)).collect();
        Ok(words?.join(" "))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Content tokens are what answer scoring counts: not a special, not
    /// punctuation, not an article or short preposition. Keeping "of"/"to"/
    /// "in" out of scoring stops incidental overlap between unrelated
    /// strings ("university of x" vs "auguries of innocence").
    pub fn is_content(&self, id: usize) -> bool {
        if self.is_special(id) {
            return false;
        }
        !matches!(
            self.words[id].as_str(),
            "." | "," | "the" | "a" | "an" | "of" | "to" | "in"
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_occupy_fixed_low_ids() {
        let v = Vocab::build();
        assert_eq!(v.word(TOK_BOS).unwrap(), "[BOS]");
        assert_eq!(v.word(TOK_EOS).unwrap(), "[EOS]");
        assert_eq!(v.word(TOK_CTX).unwrap(), "[CTX]");
        assert_eq!(v.word(TOK_Q).unwrap(), "[Q:]");
        assert_eq!(v.word(TOK_A).unwrap(), "[A:]");
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(Vocab::build(), Vocab::build());
    }

    #[test]
    fn roundtrip_encode_decode() {
        let v = Vocab::build();
        let text = "alice almeida was born in new york .";
        let ids = v.encode(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn unknown_word_is_an_error() {
        let v = Vocab::build();
        let err = v.encode("alice esperanto").unwrap_err();
        assert!(matches!(err, Error::UnknownWord(w) if w == "esperanto"));
    }

    #[test]
    fn content_filter_drops_articles_punctuation_specials() {
        let v = Vocab::build();
        for w in ["the", "a", "an", ".", ","] {
            assert!(!v.is_content(v.id(w).unwrap()), "{w} should not be content");
        }
        assert!(!v.is_content(TOK_BOS));
        assert!(v.is_content(v.id("boxer").unwrap()));
        assert!(v.is_content(v.id("1956").unwrap()));
    }

    #[test]
    fn needle_words_are_in_vocabulary() {
        let v = Vocab::build();
        for needle in crate::corpus::data::needle_pool() {
            for w in needle {
                assert!(v.id(w).is_ok(), "needle word {w} missing");
            }
        }
    }

    #[test]
    fn layout_is_specials_days_years_then_sorted_pool() {
        // Model checkpoints bake vocab ids in; the layout is a format contract.
        let v = Vocab::build();
        assert_eq!(v.word(5).unwrap(), "1");
        assert_eq!(v.word(5 + 27).unwrap(), "28");
        assert_eq!(v.word(33).unwrap(), "1900");
        assert_eq!(v.word(132).unwrap(), "1999");
        assert_eq!(v.word(133).unwrap(), ",", "sorted pool starts after years");
        assert!(v.size() > 300 && v.size() < 450, "size {}", v.size());
    }
}
