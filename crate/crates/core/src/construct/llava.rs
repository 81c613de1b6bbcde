//! LLaVA-style conversation records:
//! `{id, image_ref, conversations: [{from: "human"|"gpt", value}]}`.

use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, Provenance, Turn};
use crate::error::{Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Human,
    Gpt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: Speaker,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlavaRecord {
    pub id: String,
    pub image_ref: String,
    pub conversations: Vec<Message>,
}

impl LlavaRecord {
    pub fn from_conversation(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        conversation: &Conversation,
        detokenize: impl Fn(&[TokenId]) -> String,
    ) -> Self {
        let conversations = conversation
            .turns
            .iter()
            .flat_map(|t| {
                [
                    Message {
                        from: Speaker::Human,
                        value: detokenize(&t.question),
                    },
                    Message {
                        from: Speaker::Gpt,
                        value: detokenize(&t.answer),
                    },
                ]
            })
            .collect();
        Self {
            id: id.into(),
            image_ref: image_ref.into(),
            conversations,
        }
    }

    /// Pairs alternating human/gpt messages into turns. Every answer token is
    /// supervised.
    pub fn to_conversation(
        &self,
        provenance: Provenance,
        tokenize: impl Fn(&str) -> Result<Vec<TokenId>>,
    ) -> Result<Conversation> {
        if self.conversations.len() % 2 != 0 {
            return Err(Error::contract(format!("record {} has an unanswered message", self.id)));
        }
        let turns = self
            .conversations
            .chunks(2)
            .map(|pair| match (&pair[0].from, &pair[1].from) {
                (Speaker::Human, Speaker::Gpt) => Ok(Turn::new(tokenize(&pair[0].value)?, tokenize(&pair[1].value)?)),
                _ => Err(Error::contract(format!(
                    "record {} does not alternate human and gpt messages",
                    self.id
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Conversation::new(turns, provenance)
    }
}
