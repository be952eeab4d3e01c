use crate::ctc::BLANK;
use crate::error::{Error, Result};

/// Character vocabulary. Id 0 is the CTC blank; character `i` has id `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    chars: Vec<char>,
}

const SYNTH_LETTERS: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

impl Tokenizer {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::config(
                    "alphabet",
                    format!("duplicate character {c:?}"),
                ));
            }
        }
        Ok(Tokenizer { chars })
    }

    /// Alphabet of the synthetic corpus: the word separator `' '` followed by
    /// `alphabet_size - 1` letters.
    pub fn synthetic(alphabet_size: usize) -> Result<Self> {
        if alphabet_size < 2 || alphabet_size > SYNTH_LETTERS.len() + 1 {
            return Err(Error::config(
                "alphabet_size",
                format!("must be in 2..={}", SYNTH_LETTERS.len() + 1),
            ));
        }
        Self::new(std::iter::once(' ').chain(SYNTH_LETTERS.chars().take(alphabet_size - 1)))
    }

    /// Synthetic tokenizer matching a model's output layer.
    pub fn for_vocab_size(vocab_size: usize) -> Result<Self> {
        Self::synthetic(vocab_size.saturating_sub(1))
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    /// Alphabet plus blank.
    pub fn vocab_size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut oov = Vec::new();
        let ids: Vec<usize> = text
            .chars()
            .filter_map(|c| match self.chars.iter().position(|&a| a == c) {
                Some(i) => Some(i + 1),
                None => {
                    if !oov.contains(&c) {
                        oov.push(c);
                    }
                    None
                }
            })
            .collect();
        if oov.is_empty() {
            Ok(ids)
        } else {
            Err(Error::Vocabulary(oov))
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                if id == BLANK || id > self.chars.len() {
                    Err(Error::Index {
                        op: "decode",
                        index: id,
                        bound: self.vocab_size(),
                    })
                } else {
                    Ok(self.chars[id - 1])
                }
            })
            .collect()
    }
}
