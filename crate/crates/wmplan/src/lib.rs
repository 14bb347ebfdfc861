//! A desk-scale latent world-model planning toolkit.
//!
//! The library trains a context-windowed feedforward dynamics predictor on
//! embeddings of simple deterministic 2D environments and solves
//! goal-conditioned tasks with four trajectory optimizers under a
//! model-predictive-control harness.
//!
//! # Modules
//!
//! - [`env`] — two deterministic simulators (two-room Wall navigation and an
//!   open-arena point mass) with frameskip stepping, episode sampling, and
//!   rasterized rendering.
//! - [`dataset`] — offline trajectory generation, normalization statistics,
//!   (W+1)-slicing, train/val split, and a binary on-disk format.
//! - [`model`] — frozen random-feature visual encoder, trainable
//!   proprio/action encoders, the windowed predictor with two
//!   action-conditioning schemes, and exact reverse-mode gradients.
//! - [`training`] — teacher-forcing and multistep rollout losses (three
//!   rollout strategies, scheduled sampling, truncated backprop through
//!   time) and the AdamW training loop.
//! - [`planning`] — latent unrolling, the goal-distance planning cost, CEM,
//!   diagonal CMA-ES, gradient-descent and Adam planners, and the MPC
//!   episode loop.
//! - [`eval`] — success-rate protocol, embedding unroll errors, a linear
//!   state probe, action error/score, and Spearman rank correlation.
//! - [`cli`] — the `generate`/`train`/`plan`/`eval`/`sweep` commands over a
//!   strict TOML run configuration.
//!
//! # Determinism
//!
//! Every random draw flows from explicit 64-bit seeds through counter-based
//! ChaCha streams ([`rng`]); parallel sections reduce in a fixed order, so
//! single- and multi-threaded runs of any command produce bit-identical
//! artifacts.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod model;
pub mod planning;
pub mod rng;
pub mod training;

/// Library-wide error type.
///
/// The variants map onto the CLI exit-code contract: configuration problems
/// exit with code 2, runtime invariant violations with code 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad file, unknown key, cross-field violation).
    #[error("config error: {0}")]
    Config(String),
    /// An operation was called with arguments violating its preconditions.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A runtime invariant was violated (non-finite loss, contract breach).
    #[error("runtime invariant violated: {0}")]
    Runtime(String),
    /// Filesystem or serialization failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}
