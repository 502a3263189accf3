use std::collections::BTreeSet;

use crate::{Error, Result};

/// CTC blank id.
pub const BLANK: u32 = 0;

/// Character vocabulary; id 0 is the blank, characters follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<char>,
}

impl Tokenizer {
    /// Every character seen in `texts`, plus the space.
    pub fn from_transcripts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut set: BTreeSet<char> = texts.iter().flat_map(|t| t.as_ref().chars()).collect();
        set.insert(' ');
        Self {
            symbols: set.into_iter().collect(),
        }
    }

    /// Rebuild from the string returned by [`Tokenizer::symbols`].
    pub fn from_symbols(symbols: &str) -> Result<Self> {
        let v: Vec<char> = symbols.chars().collect();
        if v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("tokenizer symbols must be sorted and unique".into()));
        }
        Ok(Self { symbols: v })
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    /// Output classes including the blank.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.symbols
                    .binary_search(&c)
                    .map(|i| i as u32 + 1)
                    .map_err(|_| Error::InvalidArgument(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Map ids back to text; blanks and unknown ids are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != BLANK)
            .filter_map(|&i| self.symbols.get(i as usize - 1))
            .collect()
    }
}
