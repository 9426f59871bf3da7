//! Vocabulary, synthetic pseudo-speech corpus, augmentation, file IO, and
//! evaluation metrics.

pub mod augment;
pub mod io;
pub mod metrics;
pub mod task;
pub mod vocab;

pub use augment::{apply_mask_plan, draw_mask_plan, spec_mask, MaskPlan};
pub use io::{read_corpus, read_matrix, write_corpus, write_matrix, write_transcripts};
pub use metrics::{cer, corpus_cer, levenshtein};
pub use task::{generate_corpus, Corpus, TaskConfig, Utterance};
pub use vocab::Vocab;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("wrong format: expected {expected} file")]
    WrongFormat { expected: &'static str },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("parse error at byte offset {offset}: {what}")]
    Parse { offset: usize, what: String },
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("duplicate vocabulary symbol {0:?}")]
    DuplicateSymbol(String),
    #[error("unknown token symbol {0:?}")]
    UnknownSymbol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
