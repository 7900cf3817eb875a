//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate triangle {index}: area {area:e} below threshold")]
    DegenerateTriangle { index: usize, area: f64 },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("eigensolver failed to converge: residual {residual:e} after {iters} iterations")]
    ConvergenceFailure { residual: f64, iters: usize },
    #[error("texture channel count {got} does not match spectral coordinate count {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("texture coordinate ({u}, {v}) outside [-1,1]^2")]
    OutOfDomain { u: f64, v: f64 },
    #[error("billboard {billboard} anchored to triangle {anchor}, but only {frames} frames given")]
    AnchorOutOfRange {
        billboard: usize,
        anchor: usize,
        frames: usize,
    },
    #[error("forward cache missing or stale: {0}")]
    MissingForwardCache(String),
    #[error("activation cache does not match weights/input: {0}")]
    CacheMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("need at least {need} billboards for k={k} nearest neighbors, got {got}")]
    TooFewBillboards { need: usize, got: usize, k: usize },
    #[error("unsupported loss configuration: {0}")]
    UnsupportedLoss(String),
    #[error("non-finite gradient in parameter group '{group}' at index {index}")]
    NaNGradient { group: String, index: usize },
    #[error("driving sequence incompatible with trained avatar: {0}")]
    ConnectivityMismatch(String),
    #[error("data error: {0}")]
    DataError(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
