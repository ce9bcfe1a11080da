//! Neural Episodic Control at desk scale.
//!
//! This crate implements NEC — an agent built around a *differentiable
//! neural dictionary* (DND): one append-only key/value memory per action,
//! queried by kernel-weighted k-nearest-neighbour regression. Q estimates
//! read from memory are trained two ways at once: stored values receive
//! fast tabular updates on revisits, while the whole lookup (embedding
//! weights, stored keys, stored values) also receives slow gradient
//! updates from an N-step Q-learning loss.
//!
//! Alongside the agent the crate ships:
//!
//! - a kd-tree nearest-neighbour index with incremental inserts,
//!   staleness tracking and exact/approximate query modes ([`index`]),
//! - a small dense embedding network with hand-written reverse-mode
//!   gradients and an RMSProp optimizer ([`embed`]),
//! - exactly solvable environments plus a value-iteration oracle
//!   ([`envs`]),
//! - MFEC and tabular Q-learning baselines ([`baselines`]),
//! - a config-driven, seeded experiment harness with CSV/JSON run
//!   records and normalized-score aggregation ([`harness`]).
//!
//! The `nec` binary exposes the harness on the command line; see the
//! guide chapters under [`guide`] for a walkthrough.

pub mod agent;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dnd;
pub mod embed;
pub mod envs;
pub mod guide;
pub mod harness;
pub mod index;
pub mod linalg;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad shapes, out-of-range hyperparameters,
    /// unknown or malformed config keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid input to an operation (dimension mismatch, non-finite
    /// values, empty argument lists).
    #[error("input error: {0}")]
    InvalidInput(String),

    /// Violated internal contract (duplicate or unknown key id, stale
    /// lookup trace, trace/params mismatch).
    #[error("internal error: {0}")]
    Internal(String),

    /// Lookup on a memory with no entries. Callers decide the policy
    /// (the agent substitutes a default Q value, training skips the
    /// record).
    #[error("empty memory")]
    EmptyMemory,

    /// A gradient update was rejected because the gradient contained
    /// non-finite values.
    #[error("non-finite gradient")]
    NonFiniteGradient,

    /// Stepping an environment whose episode already ended.
    #[error("episode already finished")]
    EpisodeFinished,

    /// Malformed serialized data (checkpoints, run records, references).
    #[error("parse error: {0}")]
    Parse(String),

    /// Aggregation over run records is missing a reference score.
    #[error("missing reference scores for environment `{0}`")]
    MissingReference(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
