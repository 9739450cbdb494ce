//! Dataset ingestion, tokenization, delexicalization, belief (de)serialization,
//! vocabulary and turn examples.

mod belief;
mod dataset;
mod examples;
pub mod raw;
mod schema;
mod text;
mod vocab;

use std::path::PathBuf;

use thiserror::Error;

pub use belief::{parse_belief, serialize_belief, BeliefState, ParsedBelief};
pub use dataset::{
    load_canonical, load_corpus, save_canonical, validate_dialogues, CanonicalFile, Corpus, CorpusConfig, CorpusFormat,
    Dialogue, Split, SplitManifest, Turn,
};
pub use examples::{build_vocab, example_tokens, make_turn_examples, response_slots_in, TurnExample};
pub use schema::{end_marker, is_placeholder, placeholder, start_symbol, SlotSchema, END_BELIEF, PLACEHOLDER_SUFFIX};
pub use text::{delexicalize, tokenize, Delexicalizer};
pub use vocab::{Vocab, EOS, EOS_ID, GO, GO_ID, PAD, PAD_ID, UNK, UNK_ID};

use crate::kb::KbError;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON in {path} at line {line}, column {column}: {message}")]
    Json { path: PathBuf, line: usize, column: usize, message: String },
    #[error("dialogue `{dialogue}` turn {turn}: unknown slot `{slot}`")]
    UnknownSlot { dialogue: String, turn: usize, slot: String },
    #[error("dialogue `{dialogue}` turn {turn}: {message}")]
    Annotation { dialogue: String, turn: usize, message: String },
    #[error("invalid slot schema: {0}")]
    Schema(String),
    #[error("invalid belief: {0}")]
    Belief(String),
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("split manifest mismatch for {what}: expected {expected}, found {found}")]
    Manifest { what: String, expected: usize, found: usize },
    #[error("corpus configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kb(#[from] KbError),
}
