//! Soft-prompt watermarking and black-box ownership auditing for a toy
//! CLIP-like dual encoder.
//!
//! The crate covers the full pipeline at desk scale: deterministic
//! synthetic data, a frozen dual encoder with trainable soft prompts,
//! sequential (order-based) and backdoor watermark embedding, rank-
//! distance hypothesis-test verification with an executable rejection
//! bound, a removal/false-claim attack suite, and an experiment harness.

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rank;
pub mod stats;
pub mod verify;
pub mod watermark;

pub use error::{Error, Result};
pub use model::{
    ClassToken, ClassVocabulary, DualEncoderModel, LogitVector, ModelConfig, ProbabilityVector,
    PromptParams,
};
