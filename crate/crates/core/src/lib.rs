//! Multimodal incremental transformer with visual grounding for visual dialogue.
//!
//! The crate holds everything below the command line: a tape-based autodiff
//! tensor, transformer blocks, the grounding encoder, the incremental dialogue
//! encoder, the gated cross-attention decoder, training and ranking evaluation.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gcad;
pub mod grounding;
pub mod mite;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Precision};
pub use error::{Error, Result};
pub use eval::{evaluate, RankingReport};
pub use model::MitvgModel;
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tape, Tensor, Var};
pub use train::{AdamState, StepRecord, Trainer};
