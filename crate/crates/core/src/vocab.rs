//! Closed vocabulary and response templates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const QUERY_START: TokenId = 1;
pub const QUERY_END: TokenId = 2;
pub const RESPONSE_END: TokenId = 3;
pub const STREAM_EOS: TokenId = 4;
pub const TASK_PREDICT: TokenId = 5;
pub const TASK_DETECT: TokenId = 6;
pub const TASK_ANALYZE: TokenId = 7;
pub const WORD_POSSIBLE: TokenId = 8;
pub const WORD_ONGOING: TokenId = 9;
const FAMILY_BASE: TokenId = 10;
pub const FAMILIES: usize = 7;
const ANSWER_BASE: TokenId = FAMILY_BASE + FAMILIES as TokenId;
const CATEGORY_BASE: TokenId = ANSWER_BASE + FAMILIES as TokenId;

const FAMILY_NAMES: [&str; FAMILIES] = ["what", "why", "who", "where", "when", "how", "how-much"];
const ANSWER_NAMES: [&str; FAMILIES] = ["type", "cause", "actor", "place", "time", "manner", "extent"];
const CATEGORY_NAMES: [&str; 6] = ["fighting", "robbery", "explosion", "arson", "vandalism", "accident"];
const DESCRIPTION_NAMES: [&str; 6] = ["brawl", "theft", "blast", "fire", "damage", "collision"];

/// Task mode served by a session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Vap,
    Vad,
    Vaa,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Vap, Mode::Vad, Mode::Vaa];

    pub fn task_token(self) -> TokenId {
        match self {
            Mode::Vap => TASK_PREDICT,
            Mode::Vad => TASK_DETECT,
            Mode::Vaa => TASK_ANALYZE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vap => "VAP",
            Mode::Vad => "VAD",
            Mode::Vaa => "VAA",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VAP" => Ok(Mode::Vap),
            "VAD" => Ok(Mode::Vad),
            "VAA" => Ok(Mode::Vaa),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Token table for `categories` anomaly classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    categories: usize,
}

impl Vocab {
    pub fn new(categories: usize) -> Result<Self> {
        if categories == 0 {
            return Err(Error::Config("at least one category is required".into()));
        }
        Ok(Self { categories })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn size(&self) -> usize {
        CATEGORY_BASE as usize + 2 * self.categories
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.size() {
            Ok(())
        } else {
            Err(Error::Vocab { id, size: self.size() })
        }
    }

    pub fn category(&self, c: usize) -> TokenId {
        assert!(c < self.categories, "category {c} out of range");
        CATEGORY_BASE + c as TokenId
    }

    pub fn description(&self, c: usize) -> TokenId {
        assert!(c < self.categories, "category {c} out of range");
        CATEGORY_BASE + (self.categories + c) as TokenId
    }

    pub fn family(&self, f: usize) -> TokenId {
        FAMILY_BASE + (f % FAMILIES) as TokenId
    }

    pub fn answer_word(&self, f: usize) -> TokenId {
        ANSWER_BASE + (f % FAMILIES) as TokenId
    }

    /// Category index of a category token.
    pub fn category_of(&self, id: TokenId) -> Option<usize> {
        let c = id.checked_sub(CATEGORY_BASE)? as usize;
        (c < self.categories).then_some(c)
    }

    pub fn name(&self, id: TokenId) -> String {
        let fixed = [
            "<bos>",
            "<query>",
            "</query>",
            "</response>",
            "<eos>",
            "<predict>",
            "<detect>",
            "<analyze>",
            "possible",
            "ongoing",
        ];
        let i = id as usize;
        if i < fixed.len() {
            return fixed[i].to_string();
        }
        if (FAMILY_BASE..ANSWER_BASE).contains(&id) {
            return FAMILY_NAMES[(id - FAMILY_BASE) as usize].to_string();
        }
        if (ANSWER_BASE..CATEGORY_BASE).contains(&id) {
            return ANSWER_NAMES[(id - ANSWER_BASE) as usize].to_string();
        }
        let k = (id - CATEGORY_BASE) as usize;
        if k < self.categories {
            return CATEGORY_NAMES.get(k).map_or_else(|| format!("category{k}"), |s| s.to_string());
        }
        let k = k - self.categories;
        if k < self.categories {
            return DESCRIPTION_NAMES.get(k).map_or_else(|| format!("detail{k}"), |s| s.to_string());
        }
        format!("<unk:{id}>")
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }

    /// `[BOS, QUERY_START, task, QUERY_END]`.
    pub fn prompt(&self, mode: Mode) -> Vec<TokenId> {
        vec![BOS, QUERY_START, mode.task_token(), QUERY_END]
    }

    /// Prediction warning for category `c`.
    pub fn vap_response(&self, c: usize) -> Vec<TokenId> {
        vec![self.category(c), WORD_POSSIBLE, self.description(c), RESPONSE_END]
    }

    /// Detection alert for category `c`.
    pub fn vad_response(&self, c: usize) -> Vec<TokenId> {
        vec![self.category(c), WORD_ONGOING, self.description(c), RESPONSE_END]
    }

    pub fn vaa_query(&self, family: usize) -> Vec<TokenId> {
        vec![QUERY_START, self.family(family), QUERY_END]
    }

    pub fn vaa_answer(&self, c: usize, family: usize) -> Vec<TokenId> {
        vec![self.category(c), self.answer_word(family), self.description(c), RESPONSE_END]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique_and_named() {
        let v = Vocab::new(6).unwrap();
        let names: std::collections::HashSet<String> = (0..v.size() as TokenId).map(|i| v.name(i)).collect();
        assert_eq!(names.len(), v.size());
        assert_eq!(v.name(STREAM_EOS), "<eos>");
    }

    #[test]
    fn categories_are_bijective() {
        let v = Vocab::new(6).unwrap();
        for c in 0..6 {
            assert_eq!(v.category_of(v.category(c)), Some(c));
            assert_eq!(v.category_of(v.description(c)), None);
        }
        assert_eq!(v.category_of(STREAM_EOS), None);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let v = Vocab::new(2).unwrap();
        assert!(v.check(v.size() as TokenId - 1).is_ok());
        assert!(matches!(v.check(v.size() as TokenId), Err(Error::Vocab { .. })));
    }
}
