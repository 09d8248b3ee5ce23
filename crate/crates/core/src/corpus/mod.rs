//! Synthetic typed-error correction corpus.
//!
//! Sentences come from a closed template grammar; sources are produced by
//! injecting typed corruptions whose gold edits are recorded as they are made.

mod align;
mod classify;
mod generate;
mod io;
mod labels;
pub mod lexicon;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use align::{apply_edits, extract_edits};
pub use classify::{classify_edit, type_edits, Classification};
pub use generate::{generate_corpus, generate_with, inject_corruptions, split_corpus, Corruption, CorpusConfig, CorpusSplit};
pub use io::{m2_path, read_dataset, read_m2, write_dataset, write_m2, DATASET_VERSION};
pub use labels::{label_tokens, TokenLabels};
pub use vocab::{Vocabulary, END, PAD, START, UNK};

use crate::error::Error;

/// Error taxonomy. `None` (index 0) marks tokens that need no correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum ErrorType {
    #[default]
    None,
    Det,
    Prep,
    Punct,
    Spell,
    VerbSva,
    NounNum,
    Orth,
}

impl ErrorType {
    pub const ALL: [ErrorType; 8] = [
        ErrorType::None,
        ErrorType::Det,
        ErrorType::Prep,
        ErrorType::Punct,
        ErrorType::Spell,
        ErrorType::VerbSva,
        ErrorType::NounNum,
        ErrorType::Orth,
    ];
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::None => "NONE",
            ErrorType::Det => "DET",
            ErrorType::Prep => "PREP",
            ErrorType::Punct => "PUNCT",
            ErrorType::Spell => "SPELL",
            ErrorType::VerbSva => "VERB_SVA",
            ErrorType::NounNum => "NOUN_NUM",
            ErrorType::Orth => "ORTH",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown error type `{s}`")))
    }
}

impl Serialize for ErrorType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ErrorType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Span correction over source tokens `start..end`.
///
/// `start == end` is an insertion; an empty replacement with `start < end`
/// is a deletion. Multi-token replacements are joined by single spaces.
/// Serialized as the tuple `(start, end, replacement, type)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "(usize, usize, String, ErrorType)", from = "(usize, usize, String, ErrorType)")]
pub struct Edit {
    pub start: usize,
    pub end: usize,
    pub replacement: String,
    pub error_type: ErrorType,
}

impl Edit {
    pub fn new(start: usize, end: usize, replacement: impl Into<String>, error_type: ErrorType) -> Self {
        Self {
            start,
            end,
            replacement: replacement.into(),
            error_type,
        }
    }

    pub fn replacement_tokens(&self) -> impl Iterator<Item = &str> {
        self.replacement.split_whitespace()
    }

    /// Identity used for exact-match scoring: span and replacement, not type.
    pub fn key(&self) -> (usize, usize, &str) {
        (self.start, self.end, self.replacement.as_str())
    }
}

impl From<Edit> for (usize, usize, String, ErrorType) {
    fn from(e: Edit) -> Self {
        (e.start, e.end, e.replacement, e.error_type)
    }
}

impl From<(usize, usize, String, ErrorType)> for Edit {
    fn from((start, end, replacement, error_type): (usize, usize, String, ErrorType)) -> Self {
        Self {
            start,
            end,
            replacement,
            error_type,
        }
    }
}

/// One source/target pair with gold edits and per-target-token labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub edits: Vec<Edit>,
    pub labels: Vec<ErrorType>,
    /// Label of the end-of-sentence position (set by sentence-final deletions).
    pub end_label: ErrorType,
}

impl Example {
    /// Labels aligned with decoder outputs: one per target token, then end.
    pub fn decoder_labels(&self) -> Vec<ErrorType> {
        let mut l = self.labels.clone();
        l.push(self.end_label);
        l
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}
