//! Disentangles speaker embeddings into an age component and an
//! age-invariant identity component by minimizing a variational upper bound
//! on their mutual information during training.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`graph`]: dense tensors and a static reverse-mode
//!   autodiff engine with finite-difference gradient checks.
//! * [`backbone`]: toy frame encoder, two statistics-pooling branches, and
//!   the additive embedding split.
//! * [`objectives`]: angular-margin identity loss and age-group loss.
//! * [`mi`]: variational Gaussian conditional, CLUB mutual-information
//!   estimation, and the (aging-aware) MI-minimization losses.
//! * [`synth`]: synthetic dataset generator with closed-form MI oracles and
//!   cross-age trial construction.
//! * [`train`]: alternating two-optimizer training loop with ablation
//!   modes.
//! * [`metrics`]: EER / minDCF and a linear age-probe diagnostic.
//! * [`checkpoint`] / [`config`] / [`dataio`]: persistence and the flat
//!   key-value run configuration.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradsuite;
pub mod graph;
pub mod metrics;
pub mod mi;
pub mod objectives;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Named model parameters; insertion order fixes checkpoint layout.
pub type ParamSet<F> = indexmap::IndexMap<String, tensor::Tensor<F>>;

/// Fixed ChaCha substream ids, so every consumer of the run seed draws
/// from its own independent stream.
pub mod streams {
    pub const GLOBALS: u64 = 1;
    pub const SPEAKERS: u64 = 2;
    pub const UTTERANCES: u64 = 3;
    pub const TRIALS: u64 = 4;
    pub const MODEL: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const NEGATIVES: u64 = 7;
}
