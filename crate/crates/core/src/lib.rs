//! Desk-scale laboratory for the reversal curse in masked-diffusion language models.
//!
//! The crate trains a tiny bidirectional denoising transformer from scratch on a
//! synthetic relational-fact corpus and measures how exact-match accuracy differs
//! between forward queries ("A's parent is whom?") and reverse queries
//! ("B's child is whom?"). Three mitigations are implemented on top of the base
//! recipe: whole-entity masking during corruption, a direction-balanced
//! augmentation split, and an inverse-relation cloze split.
//!
//! Module map:
//! - [`corpus`]: synthetic facts, templates, and the dataset splits
//! - [`vocab`]: deterministic tokenizer and vocabulary
//! - [`masking`]: the stochastic corruption process and entity-contagion rule
//! - [`model`]: the denoising transformer with hand-derived reverse-mode gradients
//! - [`optim`]: decoupled-weight-decay adaptive optimizer
//! - [`train`]: two-stage training driver (continued pretraining, prompt-conditioned SFT)
//! - [`infer`]: iterative unmasking decoder
//! - [`eval`]: exact-match scoring, the 4x4 instruction matrix, error taxonomy

pub mod corpus;
pub mod eval;
pub mod infer;
pub mod masking;
pub mod model;
pub mod optim;
pub mod repro;
pub mod train;
pub mod util;
pub mod vocab;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("entity pool exhausted: requested {requested} entities, capacity is {capacity}")]
    PoolExhausted { requested: usize, capacity: usize },
    #[error("template error: {0}")]
    Template(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("span [{start}, {end}] not aligned to token boundaries in {text:?}")]
    SpanAlignment { start: usize, end: usize, text: String },
    #[error("special token {0} not allowed here")]
    SpecialToken(String),
    #[error("unknown relation {0:?} (no registered inverse)")]
    UnknownRelation(String),
    #[error("unknown template id {0:?}")]
    UnknownTemplate(String),
    #[error("sequence length {len} exceeds model maximum {max}")]
    Overlong { len: usize, max: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing checkpoint for training template {0:?}")]
    MissingCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
