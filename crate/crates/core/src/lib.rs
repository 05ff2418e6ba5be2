//! Cycle-consistency reward fine-tuning for a toy conditional diffusion
//! model.
//!
//! The crate trains a small pixel-space conditional denoiser, then
//! fine-tunes its control branch with a pixel-level consistency reward: a
//! frozen, differentiable condition extractor is applied to the single-step
//! reconstruction of a lightly noised training image, and the mismatch with
//! the input condition is back-propagated. Everything (autodiff, data,
//! extractors, metrics) is self-contained.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod metrics;
pub mod optim;
pub mod output;
pub mod par;
pub mod reward;
pub mod rng;
pub mod run;
pub mod schedule;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, NodeId, Tape, TapeStats, Var};
pub use tensor::Tensor;
pub use schedule::{Conditioning, NoisePredictor, NoiseSchedule, ScheduleConfig};
