//! Closed vocabulary of the synthetic world.
//!
//! Layout: 20 object words, 8 color words, 4 count words, structural words,
//! and the end-of-answer token as the last id.

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const OBJECTS: [&str; 20] = [
    "cup", "dog", "cat", "car", "ball", "book", "tree", "bird", "hat", "shoe", "key", "lamp", "fish", "boat", "cake",
    "kite", "bell", "drum", "sock", "frog",
];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "pink", "brown"];
pub const COUNTS: [&str; 4] = ["one", "two", "three", "four"];
const STRUCTURE: [&str; 13] = [
    ".", "?", "describe", "is", "there", "a", "the", "what", "color", "how", "many", "yes", "no",
];
pub const EOS_WORD: &str = "<eos>";

pub const OBJECT_BASE: TokenId = 0;
pub const COLOR_BASE: TokenId = OBJECTS.len();
pub const COUNT_BASE: TokenId = COLOR_BASE + COLORS.len();
const STRUCTURE_BASE: TokenId = COUNT_BASE + COUNTS.len();
pub const VOCAB_SIZE: usize = STRUCTURE_BASE + STRUCTURE.len() + 1;
pub const EOS: TokenId = VOCAB_SIZE - 1;

pub const PERIOD: TokenId = STRUCTURE_BASE;
pub const QMARK: TokenId = STRUCTURE_BASE + 1;
pub const DESCRIBE: TokenId = STRUCTURE_BASE + 2;
pub const IS: TokenId = STRUCTURE_BASE + 3;
pub const THERE: TokenId = STRUCTURE_BASE + 4;
pub const A: TokenId = STRUCTURE_BASE + 5;
pub const THE: TokenId = STRUCTURE_BASE + 6;
pub const WHAT: TokenId = STRUCTURE_BASE + 7;
pub const COLOR: TokenId = STRUCTURE_BASE + 8;
pub const HOW: TokenId = STRUCTURE_BASE + 9;
pub const MANY: TokenId = STRUCTURE_BASE + 10;
pub const YES: TokenId = STRUCTURE_BASE + 11;
pub const NO: TokenId = STRUCTURE_BASE + 12;

pub fn word(id: TokenId) -> Option<&'static str> {
    if id < COLOR_BASE {
        Some(OBJECTS[id])
    } else if id < COUNT_BASE {
        Some(COLORS[id - COLOR_BASE])
    } else if id < STRUCTURE_BASE {
        Some(COUNTS[id - COUNT_BASE])
    } else if id < EOS {
        Some(STRUCTURE[id - STRUCTURE_BASE])
    } else if id == EOS {
        Some(EOS_WORD)
    } else {
        None
    }
}

pub fn token(word: &str) -> Result<TokenId> {
    (0..VOCAB_SIZE)
        .find(|&id| self::word(id) == Some(word))
        .ok_or_else(|| Error::UnknownToken(word.to_string()))
}

/// Whitespace tokenization against the closed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace().map(token).collect()
}

pub fn detokenize(ids: &[TokenId]) -> String {
    ids.iter()
        .map(|&t| word(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_object(id: TokenId) -> bool {
    id < COLOR_BASE
}

pub fn is_color(id: TokenId) -> bool {
    (COLOR_BASE..COUNT_BASE).contains(&id)
}

pub fn is_count(id: TokenId) -> bool {
    (COUNT_BASE..STRUCTURE_BASE).contains(&id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_fits_budget_and_ends_with_eos() {
        assert!(VOCAB_SIZE <= 48);
        assert_eq!(word(EOS), Some(EOS_WORD));
        assert_eq!(word(VOCAB_SIZE), None);
    }

    #[test]
    fn words_are_unique() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..VOCAB_SIZE {
            assert!(seen.insert(word(id).unwrap()));
        }
    }

    #[test]
    fn tokenize_round_trips() {
        let ids = tokenize("two red cup . <eos>").unwrap();
        assert_eq!(detokenize(&ids), "two red cup . <eos>");
        assert!(matches!(tokenize("two purple cup"), Err(Error::UnknownToken(_))));
    }
}
