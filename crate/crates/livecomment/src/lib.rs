//! Live-comment generation for streamed video.
//!
//! A triple-encoder transformer conditions on three context modalities of a
//! clip — frame features, transcribed audio, and recent chat comments — and
//! decodes a new comment through per-modality cross-attention. The crate
//! bundles everything needed to run the system at desk scale: a small
//! reverse-mode autodiff tensor library, the model itself, chat-log
//! preprocessing and a synthetic corpus generator, two-stage training (MLM
//! pretraining + teacher-forced training), and a retrieval evaluation
//! harness (Recall@K / Mean Rank / MRR over three candidate strategies).

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
