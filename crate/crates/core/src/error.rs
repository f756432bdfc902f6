use thiserror::Error;

/// Errors produced by the crystal laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("interaction kernel violates E2 symmetry at offset {offset:?}: |V(-z) - V(z)^T| = {defect:e}")]
    Asymmetric { offset: Vec<i32>, defect: f64 },

    #[error("condition E3 violated at theta = {theta:?}: least eigenvalue {value:e}")]
    NotNonNegative { theta: Vec<f64>, value: f64 },

    #[error("node {node} lies inside the C_* surrogate (crossing cell in its stencil)")]
    InsideCrossing { node: usize },

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("imaginary residue {residue:e} exceeds {limit:e}")]
    ImaginaryResidue { residue: f64, limit: f64 },

    #[error("wavefront wraps around the periodic window: v_max * t = {reach} >= L/2 = {half} (v_max = {v_max})")]
    Wraparound { v_max: f64, reach: f64, half: f64 },

    #[error("time step {dt} exceeds 0.1/omega_max = {limit}")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("cutoff g vanishes identically for epsilon = {0}")]
    EmptyCutoff(f64),

    #[error("spectral density is not PSD at node {node}: least eigenvalue {value:e}")]
    NotPsd { node: usize, value: f64 },

    #[error("condition ES failed while C_0 is nonempty (fraction {c0_fraction})")]
    EsFailed { c0_fraction: f64 },

    #[error("symbol is singular at non-excluded node {node}")]
    Singular { node: usize },

    #[error("ensemble too small: {got} < {need}")]
    EnsembleTooSmall { got: usize, need: usize },

    #[error("ensemble states carry different time stamps ({0} vs {1})")]
    MixedTimes(f64, f64),

    #[error("Parseval mismatch in quadratic form: real space {real_space} vs Fourier {fourier}")]
    ParsevalMismatch { real_space: f64, fourier: f64 },

    #[error("all nodes flagged: {0}")]
    AllFlagged(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
