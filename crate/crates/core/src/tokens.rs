//! Token classes and vocabulary-driven classification.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    Special,
    Punctuation,
    Other,
}

impl TokenClass {
    pub fn as_u8(self) -> u8 {
        match self {
            TokenClass::Special => 0,
            TokenClass::Punctuation => 1,
            TokenClass::Other => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(TokenClass::Special),
            1 => Some(TokenClass::Punctuation),
            2 => Some(TokenClass::Other),
            _ => None,
        }
    }
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenClass::Special => "special",
            TokenClass::Punctuation => "punctuation",
            TokenClass::Other => "other",
        })
    }
}

impl FromStr for TokenClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "special" => Ok(TokenClass::Special),
            "punctuation" | "punct" => Ok(TokenClass::Punctuation),
            "other" => Ok(TokenClass::Other),
            _ => Err(Error::InvalidParameter(format!("unknown token class `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub position: usize,
    pub token_id: u32,
    pub class: TokenClass,
}

/// Declares which token ids are special and which are punctuation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VocabMetadata {
    pub special: BTreeSet<u32>,
    pub punctuation: BTreeSet<u32>,
}

impl VocabMetadata {
    pub fn new(
        special: impl IntoIterator<Item = u32>,
        punctuation: impl IntoIterator<Item = u32>,
    ) -> Self {
        Self {
            special: special.into_iter().collect(),
            punctuation: punctuation.into_iter().collect(),
        }
    }

    /// Builds metadata from `(id, text)` pairs: texts made only of ASCII
    /// punctuation become punctuation ids; ids listed in `special` are special.
    pub fn from_symbols<'a>(
        symbols: impl IntoIterator<Item = (u32, &'a str)>,
        special: impl IntoIterator<Item = u32>,
    ) -> Self {
        let punctuation = symbols
            .into_iter()
            .filter(|(_, text)| is_punctuation_text(text))
            .map(|(id, _)| id)
            .collect();
        Self {
            special: special.into_iter().collect(),
            punctuation,
        }
    }

    pub fn class_of(&self, token_id: u32) -> TokenClass {
        if self.special.contains(&token_id) {
            TokenClass::Special
        } else if self.punctuation.contains(&token_id) {
            TokenClass::Punctuation
        } else {
            TokenClass::Other
        }
    }
}

pub fn is_punctuation_text(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| c.is_ascii_punctuation())
}

/// Labels each token; Special wins when the metadata lists an id in both sets.
pub fn classify_tokens(token_ids: &[u32], vocab: &VocabMetadata) -> Vec<TokenAnnotation> {
    let overlap: Vec<_> = vocab.special.intersection(&vocab.punctuation).collect();
    if !overlap.is_empty() {
        log::warn!("token ids {overlap:?} are both special and punctuation; treating as special");
    }
    token_ids
        .iter()
        .enumerate()
        .map(|(position, &token_id)| TokenAnnotation {
            position,
            token_id,
            class: vocab.class_of(token_id),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        let vocab = VocabMetadata::from_symbols(
            [(0, "<s>"), (5, "."), (6, ":"), (7, "?"), (9, "cat"), (10, "a.b")],
            [0],
        );
        let ann = classify_tokens(&[0, 5, 9, 7, 10, 12345], &vocab);
        let classes: Vec<_> = ann.iter().map(|a| a.class).collect();
        assert_eq!(
            classes,
            [
                TokenClass::Special,
                TokenClass::Punctuation,
                TokenClass::Other,
                TokenClass::Punctuation,
                TokenClass::Other,
                TokenClass::Other,
            ]
        );
        assert_eq!(ann[3].position, 3);
    }

    #[test]
    fn special_takes_precedence() {
        let vocab = VocabMetadata::new([3], [3, 4]);
        let ann = classify_tokens(&[3, 4], &vocab);
        assert_eq!(ann[0].class, TokenClass::Special);
        assert_eq!(ann[1].class, TokenClass::Punctuation);
    }

    #[test]
    fn class_codes_round_trip() {
        for c in [TokenClass::Special, TokenClass::Punctuation, TokenClass::Other] {
            assert_eq!(TokenClass::from_u8(c.as_u8()), Some(c));
            assert_eq!(c.to_string().parse::<TokenClass>().unwrap(), c);
        }
        assert_eq!(TokenClass::from_u8(3), None);
    }
}
