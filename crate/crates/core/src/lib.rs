//! Two-branch query-based pre-training for human-object interaction detectors.
//!
//! The library implements a miniature detection-transformer trained jointly on
//! box-labeled, action-labeled (image and video) and caption-labeled data:
//!
//! * [`model`] — patch embedder, transformer encoder, the shared detection
//!   decoder, the interaction decoder, and the prediction heads.
//! * [`branches`] — the detection branch and the person-query verb branch
//!   (reliable-person-query selection, verb prediction fusion, caption
//!   alignment).
//! * [`losses`] — bipartite matching and every loss term with its weighting.
//! * [`captions`] — caption-to-triplet parsing, prompt templating, text
//!   embedding, clustering and the negative bank.
//! * [`data`] — synthetic dataset generators, manifest ingestion, the
//!   multi-dataset batch composer, and denoising-query construction.
//! * [`transfer`] — checkpoint serialization and the partial initialization
//!   strategies for downstream detectors.
//! * [`train`] / [`config`] / [`probe`] / [`plot`] — run orchestration behind
//!   the CLI.

pub mod autodiff;
pub mod branches;
pub mod captions;
pub mod config;
pub mod data;
pub mod losses;
pub mod model;
pub mod plot;
pub mod probe;
pub mod train;
pub mod transfer;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty reliable-person-query set; caller must skip this sample")]
    EmptyRpq,

    #[error("prediction head `{requested}` does not match decoder output `{state}`")]
    WrongDecoderState {
        requested: &'static str,
        state: &'static str,
    },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("transfer error: {0}")]
    Transfer(String),

    #[error("loss log line {line}: {msg}")]
    LossLog { line: usize, msg: String },

    #[error("text encoder failed on prompt {prompt:?}: {msg}")]
    TextEncoder { prompt: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
