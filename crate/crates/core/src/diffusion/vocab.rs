//! Prompt vocabulary: fixed base words plus dynamic slots for learned vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
/// Slot holding the shared artifact-free embedding.
pub const PHI_SLOT: &str = "<phi>";
/// Slot holding a subject embedding.
pub const SUBJECT_SLOT: &str = "<v>";

/// One position of a tokenized prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    /// Row of the base embedding table.
    Base(usize),
    /// Named dynamic slot; its vector comes from [`SlotValues`].
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    slots: BTreeSet<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, slots: &[&str]) -> Result<Self> {
        let mut v = Vocabulary { words, slots: BTreeSet::new(), index: HashMap::new() };
        v.rebuild()?;
        for s in slots {
            v.register_slot(s)?;
        }
        Ok(v)
    }

    /// Toy-corpus vocabulary with the `<phi>` and `<v>` slots registered.
    pub fn toy() -> Self {
        Self::new(crate::corpus::vocabulary_words(), &[PHI_SLOT, SUBJECT_SLOT]).expect("static vocabulary")
    }

    /// Restores the lookup index after deserialization and checks invariants.
    pub fn rebuild(&mut self) -> Result<()> {
        self.index.clear();
        for (i, w) in self.words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if self.index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        if !self.index.contains_key(PAD) {
            return Err(Error::Config("vocabulary lacks the padding token".into()));
        }
        if let Some(s) = self.slots.iter().find(|s| self.index.contains_key(*s)) {
            return Err(Error::Config(format!("slot {s:?} collides with a base word")));
        }
        Ok(())
    }

    pub fn register_slot(&mut self, name: &str) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("slot {name:?} collides with a base word")));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::Config(format!("invalid slot name {name:?}")));
        }
        self.slots.insert(name.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn has_slot(&self, name: &str) -> bool {
        self.slots.contains(name)
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn pad_id(&self) -> usize {
        self.index[PAD]
    }

    pub fn token(&self, word: &str) -> Result<Token> {
        if let Some(&i) = self.index.get(word) {
            Ok(Token::Base(i))
        } else if self.slots.contains(word) {
            Ok(Token::Slot(word.to_string()))
        } else {
            Err(Error::UnknownToken(word.to_string()))
        }
    }

    /// Splits on whitespace and resolves every word.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<Token>> {
        prompt.split_whitespace().map(|w| self.token(w)).collect()
    }

    /// Checks that every slot referenced by `tokens` is registered.
    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        for t in tokens {
            match t {
                Token::Base(i) if *i >= self.words.len() => {
                    return Err(Error::UnknownToken(format!("#{i}")));
                }
                Token::Slot(s) if !self.slots.contains(s) => return Err(Error::UnregisteredSlot(s.clone())),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Current vectors of the dynamic slots.
pub type SlotValues = BTreeMap<String, Array1<f64>>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_and_words_resolve() {
        let v = Vocabulary::toy();
        assert_eq!(v.token("photo").unwrap(), Token::Base(v.word_id("photo").unwrap()));
        assert_eq!(v.token(PHI_SLOT).unwrap(), Token::Slot(PHI_SLOT.into()));
        assert!(matches!(v.token("zebra"), Err(Error::UnknownToken(_))));
        assert_eq!(v.tokenize("a <phi> photo of <v>").unwrap().len(), 5);
    }

    #[test]
    fn slot_cannot_shadow_word() {
        let mut v = Vocabulary::toy();
        assert!(v.register_slot("photo").is_err());
        assert!(v.register_slot("<w>").is_ok());
        assert!(matches!(v.check(&[Token::Slot("<q>".into())]), Err(Error::UnregisteredSlot(_))));
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = Vocabulary::toy();
        let mut back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        back.rebuild().unwrap();
        assert_eq!(back.word_id("red"), v.word_id("red"));
    }
}
