//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any layer of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric parameter violated its domain (non-positive noise scale,
    /// sampling rate outside (0, 1], and so on).
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    /// Two RDP curves were combined but were not defined on the same
    /// order grid.
    #[error("order-grid mismatch: {0}")]
    GridMismatch(String),

    /// A privacy target cannot be met; `stage` names the component that
    /// already exceeds the budget on its own.
    #[error("infeasible privacy target: {stage} alone yields epsilon {achieved:.4} > target {target:.4}")]
    InfeasibleTarget {
        stage: &'static str,
        achieved: f64,
        target: f64,
    },

    /// A tape primitive was asked to combine tensors with incompatible
    /// shapes; names the primitive and the offending node ids.
    #[error("shape mismatch in {op} (nodes {lhs}, {rhs}): {detail}")]
    ShapeMismatch {
        op: &'static str,
        lhs: usize,
        rhs: usize,
        detail: String,
    },

    /// Tape misuse: backward invoked on an invalid or non-scalar node.
    #[error("tape usage error: {0}")]
    TapeUsage(String),

    /// A model input was out of range (unknown label, timestep outside
    /// the schedule).
    #[error("invalid model input: {0}")]
    InvalidInput(String),

    /// A LoRA rank exceeded the target matrix's smaller dimension.
    #[error("rank {rank} too large for matrix {id} with shape {rows}x{cols}")]
    RankTooLarge {
        rank: usize,
        id: String,
        rows: usize,
        cols: usize,
    },

    /// A gradient or loss left the finite range during training.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Undefined budget ratio: both stages have zero RDP cost.
    #[error("budget ratio undefined: both curves are identically zero")]
    UndefinedRatio,

    /// Checkpoint or config file problems.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed checkpoint contents.
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    /// Malformed JSON configuration.
    #[error("bad config: {0}")]
    BadConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
