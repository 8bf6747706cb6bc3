use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer} ({kind}): expected {expected:?}, got {actual:?}")]
    LayerShape {
        layer: usize,
        kind: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("step size undefined: weight tensor is all zero")]
    ZeroWeights,

    #[error("code {code} does not fit in {n_q}-bit two's complement")]
    CodeOutOfRange { code: i64, n_q: u32 },

    #[error("unsupported bit-width {0} (expected 2..=16)")]
    BitWidth(u32),

    #[error("model is in {actual} mode, operation requires {required} mode")]
    Mode {
        required: &'static str,
        actual: &'static str,
    },

    #[error("no effective flip available")]
    NoEffectiveFlip,

    #[error("non-finite sample loss {0}")]
    NonFiniteLoss(f64),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget {budget} exceeds available {available}")]
    Budget { budget: usize, available: usize },

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("checkpoint digest mismatch: refusing to load {0}")]
    Digest(PathBuf),

    #[error("no eligible weight for bit {0}")]
    NoEligibleWeight(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
