//! Harmonic crystals on periodic lattices: dispersion analysis, exact
//! spectral dynamics, Gaussian and non-Gaussian initial measures, and the
//! covariance machinery of convergence to statistical equilibrium.
//!
//! Fourier convention throughout: `f̂(θ) = Σ_x f(x) e^{ixθ}` on the dual
//! grid `θ = 2πk/L`, inverse `f(x) = L^{-d} Σ_θ e^{-ixθ} f̂(θ)`.

pub mod covariance;
pub mod dynamics;
pub mod error;
pub mod fields;
pub mod fit;
pub mod kernel;
pub mod lattice;
pub mod linalg;
pub mod report;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
pub use kernel::{build_nn_kernel, check_e123, random_finite_range_kernel, InteractionKernel};
pub use lattice::Lattice;
pub use report::{Condition, ConditionReport, Verdict};
pub use spectral::{DispersionGrid, Thresholds};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
