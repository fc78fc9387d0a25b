use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("point {z} lies within {distance:.3e} of a pole")]
    PoleProximity { z: Complex64, distance: f64 },

    #[error("value {w} is at or near an omitted value of the map")]
    OmittedValue { w: Complex64 },

    #[error(
        "truncation failed at {branches} branches: certified tail {certified_tail:.3e} exceeds tolerance {tol:.3e}"
    )]
    TruncationFailure {
        branches: u32,
        certified_tail: f64,
        tol: f64,
    },

    #[error("inverse branch undefined at depth {depth}: {source}")]
    BranchUndefined {
        depth: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("orbit reaches a pole at step {depth}")]
    OrbitEscape { depth: usize },

    #[error(
        "preimage tree exceeded node budget {budget} at depth {achieved_depth} ({nodes} nodes)"
    )]
    NodeBudget {
        budget: usize,
        achieved_depth: usize,
        nodes: usize,
    },

    #[error("seed polishing failed: {0}")]
    SeedPolish(String),

    #[error("sampled point {z} violates |z| >= T_floor = {t_floor}")]
    BadRegime { z: Complex64, t_floor: f64 },

    #[error("cloud resolution {resolution:.3e} is coarser than delta {delta:.3e}")]
    CoarseCloud { resolution: f64, delta: f64 },

    #[error("convergence failure: {message}")]
    Convergence {
        message: String,
        per_n: Vec<(usize, f64)>,
    },

    #[error("construction disagreement: {0}")]
    Disagreement(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParams(msg.into())
    }
}
