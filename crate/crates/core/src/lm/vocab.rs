use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOS: &str = "<bos>";

/// Closed word-level vocabulary; id 0 is always `<bos>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl Vocab {
    /// Builds a vocabulary from words in first-seen order, deduplicated.
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = vec![BOS.to_string()];
        let mut seen: std::collections::HashSet<String> = list.iter().cloned().collect();
        for w in words {
            let w = w.as_ref();
            if seen.insert(w.to_string()) {
                list.push(w.to_string());
            }
        }
        Self::from(list)
    }

    /// Collects every whitespace-separated word of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::new(texts.into_iter().flat_map(str::split_whitespace))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bos(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Tokenize(format!("unknown word `{w}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
