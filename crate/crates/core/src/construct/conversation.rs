use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Gt,
    Constructed,
    Appended,
}

/// One question/answer exchange. Only answer tokens flagged in `mask` are
/// supervised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl Turn {
    /// Turn with every answer token supervised.
    pub fn new(question: Vec<TokenId>, answer: Vec<TokenId>) -> Self {
        let mask = vec![true; answer.len()];
        Self { question, answer, mask }
    }

    pub fn validate(&self) -> Result<()> {
        if self.question.is_empty() || self.answer.is_empty() {
            return Err(Error::contract("turn needs a question and an answer"));
        }
        if self.mask.len() != self.answer.len() {
            return Err(Error::contract(format!(
                "mask of length {} for answer of length {}",
                self.mask.len(),
                self.answer.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub turns: Vec<Turn>,
    pub provenance: Provenance,
}

impl Conversation {
    pub fn new(turns: Vec<Turn>, provenance: Provenance) -> Result<Self> {
        let c = Self { turns, provenance };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::contract("conversation needs at least one turn"));
        }
        self.turns.iter().try_for_each(Turn::validate)
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}
