use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

/// Whitespace vocabulary with `[PAD]`, `[UNK]`, `[MASK]` at ids 0, 1, 2 and
/// corpus tokens after them in first-appearance order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v = Vocab::from(vec![PAD.to_string(), UNK.to_string(), MASK.to_string()]);
        for line in lines {
            for tok in line.split_whitespace() {
                v.push(tok);
            }
        }
        if v.len() == 3 {
            return Err(Error::EmptyCorpus);
        }
        Ok(v)
    }

    fn push(&mut self, tok: &str) {
        if !self.index.contains_key(tok) {
            self.index.insert(tok.to_string(), self.tokens.len());
            self.tokens.push(tok.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes on whitespace; the first `[MASK]` becomes the mask position.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let tokens: Vec<usize> = text.split_whitespace().map(|t| self.id_or_unk(t)).collect();
        let mask_position = tokens.iter().position(|&t| t == MASK_ID);
        TokenSequence {
            tokens,
            mask_position,
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Id of a single-token answer.
    pub fn answer_id(&self, answer: &str) -> Result<usize> {
        let mut toks = answer.split_whitespace();
        match (toks.next(), toks.next()) {
            (Some(t), None) => match self.id(t) {
                Some(id) if id > MASK_ID => Ok(id),
                _ => Err(Error::AnswerNotInVocab(answer.to_string())),
            },
            _ => Err(Error::AnswerNotInVocab(answer.to_string())),
        }
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
