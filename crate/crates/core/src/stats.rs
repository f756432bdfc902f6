//! Ensemble estimators: translation-averaged covariances with jackknife
//! errors, linear functionals, characteristic functionals and moments.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{quadratic_form, TestFunction};
use crate::dynamics::FieldState;
use crate::error::{Error, Result};
use crate::fields::SpectralDensity;
use crate::linalg::RMatrix;

pub const MIN_COVARIANCE_SAMPLES: usize = 100;
pub const MIN_MOMENT_SAMPLES: usize = 1000;
/// Scalings of the test function probed by the characteristic functional.
pub const LAMBDA_SWEEP: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub offset: Vec<i64>,
    pub mean: RMatrix,
    pub stderr: RMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub samples: usize,
    pub time: f64,
    pub covariances: Vec<CovarianceEstimate>,
}

impl EnsembleSummary {
    pub fn at(&self, offset: &[i64]) -> Option<&CovarianceEstimate> {
        self.covariances.iter().find(|c| c.offset == offset)
    }
}

fn common_time(ensemble: &[FieldState]) -> Result<f64> {
    let t = ensemble[0].time;
    for s in ensemble {
        if s.time != t {
            return Err(Error::MixedTimes(t, s.time));
        }
        if s.lattice != ensemble[0].lattice || s.components != ensemble[0].components {
            return Err(Error::LatticeMismatch("ensemble members live on different lattices".into()));
        }
    }
    Ok(t)
}

/// Leave-one-out jackknife over per-sample values: `(mean, standard error)`.
pub fn jackknife(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    let mean = total / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var: f64 = values
        .iter()
        .map(|v| {
            let loo = (total - v) / (n - 1.0);
            (loo - mean).powi(2)
        })
        .sum::<f64>()
        * (n - 1.0)
        / n;
    (mean, var.sqrt())
}

/// `q_emp^{ij}(z)` = mean over samples and base points of `Y^i(x+z) ⊗ Y^j(x)`.
pub fn empirical_covariance(ensemble: &[FieldState], offsets: &[Vec<i64>]) -> Result<EnsembleSummary> {
    if ensemble.len() < MIN_COVARIANCE_SAMPLES {
        return Err(Error::EnsembleTooSmall { got: ensemble.len(), need: MIN_COVARIANCE_SAMPLES });
    }
    let time = common_time(ensemble)?;
    let lat = ensemble[0].lattice;
    let m = 2 * ensemble[0].components;
    let deltas: Vec<Vec<isize>> = offsets.iter().map(|z| z.iter().map(|&c| c as isize).collect()).collect();
    if deltas.iter().any(|z| z.len() != lat.dim) {
        return Err(Error::InvalidParameter("offset dimension does not match lattice".into()));
    }
    // per_sample[s][o][a*m+b]
    let per_sample: Vec<Vec<Vec<f64>>> = ensemble
        .par_iter()
        .map(|y| {
            deltas
                .iter()
                .map(|z| {
                    let mut acc = vec![0.0; m * m];
                    for x in 0..lat.len() {
                        let xz = lat.offset(x, z);
                        for a in 0..m {
                            let ya = y.get(xz, a);
                            for b in 0..m {
                                acc[a * m + b] += ya * y.get(x, b);
                            }
                        }
                    }
                    acc.iter_mut().for_each(|v| *v /= lat.len() as f64);
                    acc
                })
                .collect()
        })
        .collect();
    let covariances = offsets
        .iter()
        .enumerate()
        .map(|(o, z)| {
            let mut mean = RMatrix::zeros(m, m);
            let mut stderr = RMatrix::zeros(m, m);
            for a in 0..m {
                for b in 0..m {
                    let vals: Vec<f64> = per_sample.iter().map(|s| s[o][a * m + b]).collect();
                    let (mu, se) = jackknife(&vals);
                    mean[(a, b)] = mu;
                    stderr[(a, b)] = se;
                }
            }
            CovarianceEstimate { offset: z.clone(), mean, stderr }
        })
        .collect();
    Ok(EnsembleSummary { samples: ensemble.len(), time, covariances })
}

/// Plain estimator of `E Y^a(x) Y^b(y)` at fixed sites: `(mean, stderr)`.
pub fn fixed_site_covariance(ensemble: &[FieldState], x: usize, y: usize, a: usize, b: usize) -> (f64, f64) {
    let vals: Vec<f64> = ensemble.iter().map(|s| s.get(x, a) * s.get(y, b)).collect();
    jackknife(&vals)
}

/// `⟨Y, Ψ⟩ = Σ_x (Y(x), Ψ(x))` for each sample.
pub fn linear_functional_samples(ensemble: &[FieldState], psi: &TestFunction) -> Result<Vec<f64>> {
    if ensemble.is_empty() {
        return Ok(Vec::new());
    }
    let lat = ensemble[0].lattice;
    if psi.components != ensemble[0].components {
        return Err(Error::InvalidParameter("test function has the wrong number of components".into()));
    }
    let sites = psi.sites(&lat)?;
    Ok(ensemble
        .par_iter()
        .map(|y| {
            sites
                .iter()
                .zip(&psi.support)
                .map(|(&x, (_, w))| w.iter().enumerate().map(|(c, wc)| wc * y.get(x, c)).sum::<f64>())
                .sum()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicPoint {
    pub lambda: f64,
    pub empirical_re: f64,
    pub empirical_im: f64,
    pub theoretical: f64,
    /// `|ĉ(λ) - exp(-½λ²Q)|`.
    pub gap: f64,
    /// Monte Carlo standard error of `ĉ(λ)`.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacteristicReport {
    pub samples: usize,
    pub quadratic_form: f64,
    pub points: Vec<CharacteristicPoint>,
}

impl CharacteristicReport {
    /// Every gap below `k·σ + slack`.
    pub fn within(&self, k: f64, slack: f64) -> bool {
        self.points.iter().all(|p| p.gap < k * p.sigma + slack)
    }

    pub fn at(&self, lambda: f64) -> Option<&CharacteristicPoint> {
        self.points.iter().find(|p| p.lambda == lambda)
    }
}

/// Empirical `E exp(iλ⟨Y,Ψ⟩)` against `exp(-½λ²Q)` over [`LAMBDA_SWEEP`].
pub fn characteristic_sweep(samples: &[f64], q: f64) -> Result<CharacteristicReport> {
    if samples.len() < MIN_MOMENT_SAMPLES {
        return Err(Error::EnsembleTooSmall { got: samples.len(), need: MIN_MOMENT_SAMPLES });
    }
    let n = samples.len() as f64;
    let points = LAMBDA_SWEEP
        .iter()
        .map(|&lambda| {
            let vals: Vec<Complex64> = samples.iter().map(|s| Complex64::from_polar(1.0, lambda * s)).collect();
            let mean: Complex64 = vals.iter().sum::<Complex64>() / n;
            let var = vals.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() / (n - 1.0);
            let theoretical = (-0.5 * lambda * lambda * q).exp();
            CharacteristicPoint {
                lambda,
                empirical_re: mean.re,
                empirical_im: mean.im,
                theoretical,
                gap: (mean - theoretical).norm(),
                sigma: (var / n).sqrt(),
            }
        })
        .collect();
    Ok(CharacteristicReport { samples: samples.len(), quadratic_form: q, points })
}

/// [`characteristic_sweep`] with `Q = quadratic_form(density, Ψ)`.
pub fn characteristic_functional(samples: &[f64], density: &SpectralDensity, psi: &TestFunction) -> Result<CharacteristicReport> {
    let q = quadratic_form(density, psi)?;
    characteristic_sweep(samples, q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianityReport {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub skewness_z: Option<f64>,
    pub kurtosis_z: Option<f64>,
    pub degenerate: bool,
}

impl GaussianityReport {
    pub fn within(&self, limit: f64) -> bool {
        matches!((self.skewness_z, self.kurtosis_z), (Some(s), Some(k)) if s.abs() < limit && k.abs() < limit)
    }
}

/// Standardized moments with null errors `√(6/N)` and `√(24/N)`.
pub fn gaussianity_report(samples: &[f64]) -> Result<GaussianityReport> {
    if samples.len() < MIN_MOMENT_SAMPLES {
        return Err(Error::EnsembleTooSmall { got: samples.len(), need: MIN_MOMENT_SAMPLES });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let central = |p: i32| samples.iter().map(|x| (x - mean).powi(p)).sum::<f64>() / n;
    let m2 = central(2);
    if !(m2 > 1e-300) {
        return Ok(GaussianityReport {
            samples: samples.len(),
            mean,
            variance: m2,
            skewness: 0.0,
            excess_kurtosis: 0.0,
            skewness_z: None,
            kurtosis_z: None,
            degenerate: true,
        });
    }
    let skewness = central(3) / m2.powf(1.5);
    let excess_kurtosis = central(4) / (m2 * m2) - 3.0;
    Ok(GaussianityReport {
        samples: samples.len(),
        mean,
        variance: m2,
        skewness,
        excess_kurtosis,
        skewness_z: Some(skewness / (6.0 / n).sqrt()),
        kurtosis_z: Some(excess_kurtosis / (24.0 / n).sqrt()),
        degenerate: false,
    })
}

/// `Σ_x (|u(x)|² + |v(x)|²)(1 + |x|²)^α` with the minimal-image `|x|`.
pub fn weighted_norm(state: &FieldState, alpha: f64) -> f64 {
    let n = state.components;
    (0..state.lattice.len())
        .map(|x| {
            let r = state.lattice.torus_norm(x);
            let w = (1.0 + r * r).powf(alpha);
            let s: f64 = state.u[x * n..(x + 1) * n]
                .iter()
                .chain(&state.v[x * n..(x + 1) * n])
                .map(|a| a * a)
                .sum();
            s * w
        })
        .sum()
}
