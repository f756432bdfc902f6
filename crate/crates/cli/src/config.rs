use std::path::{Path, PathBuf};

use crystalstat_core::fields::{transformed_density, triangular_density, white_noise_density, SpectralDensity};
use crystalstat_core::kernel::KernelDocument;
use crystalstat_core::{build_nn_kernel, random_finite_range_kernel, InteractionKernel, Thresholds};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelSpec {
    Nn {
        d: usize,
        n: usize,
        masses: Vec<f64>,
    },
    Random {
        d: usize,
        n: usize,
        #[serde(rename = "N")]
        range: usize,
        seed: u64,
        #[serde(default = "yes")]
        shift: bool,
    },
    File {
        path: PathBuf,
    },
    Inline(KernelDocument),
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum MeasureSpec {
    Triangular {
        nu0: usize,
        #[serde(rename = "T0")]
        t0: f64,
        #[serde(rename = "T1")]
        t1: f64,
    },
    White {
        #[serde(rename = "T0")]
        t0: f64,
        #[serde(rename = "T1")]
        t1: f64,
    },
    /// Triangular Gaussian field pushed through `a·tanh(y/a)`.
    Transformed {
        nu0: usize,
        #[serde(rename = "T0")]
        t0: f64,
        #[serde(rename = "T1")]
        t1: f64,
        a0: f64,
        a1: f64,
        #[serde(default = "default_order")]
        order: usize,
    },
    File {
        path: PathBuf,
    },
}

fn default_order() -> usize {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub kernel: KernelSpec,
    #[serde(rename = "L")]
    pub size: usize,
    /// Per-axis grid used by the E1-E3 check; defaults to `L`.
    pub resolution: Option<usize>,
    pub measure: MeasureSpec,
    pub times: Vec<f64>,
    pub ensemble: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub eps: f64,
    pub out: PathBuf,
    /// Proceed with limit experiments even when E4-E5 do not pass.
    #[serde(rename = "override")]
    pub override_conditions: bool,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::Nn { d: 1, n: 1, masses: vec![1.0] },
            size: 128,
            resolution: None,
            measure: MeasureSpec::Triangular { nu0: 2, t0: 1.0, t1: 1.0 },
            times: vec![50.0],
            ensemble: 1000,
            seed: 0,
            thresholds: Thresholds::default(),
            eps: 0.3,
            out: PathBuf::from("crystalstat-out"),
            override_conditions: false,
            threads: None,
        }
    }
}

impl ExperimentConfig {
    /// Read a config document, or the `config` member of a manifest.
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let value = match value.get("tool") {
            Some(_) => value.get("config").cloned().ok_or_else(|| UsageError("manifest has no config".into()))?,
            None => value,
        };
        serde_json::from_value(value).map_err(|e| UsageError(format!("{}: {e}", path.display())))
    }

    pub fn grid_resolution(&self) -> usize {
        self.resolution.unwrap_or(self.size)
    }

    pub fn build_kernel(&self) -> Result<InteractionKernel, UsageError> {
        let kernel = match &self.kernel {
            KernelSpec::Nn { d, n, masses } => build_nn_kernel(*d, *n, masses),
            KernelSpec::Random { d, n, range, seed, shift } => random_finite_range_kernel(*d, *n, *range, *seed, *shift),
            KernelSpec::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
                InteractionKernel::from_json(&text)
            }
            KernelSpec::Inline(doc) => InteractionKernel::from_document(doc),
        };
        kernel.map_err(|e| UsageError(format!("kernel: {e}")))
    }

    /// Spectral density of the initial measure (its covariance for the
    /// non-Gaussian transformed measure).
    pub fn initial_density(&self, dim: usize, components: usize) -> Result<SpectralDensity, UsageError> {
        let scalar = |what: &str| {
            if components != 1 {
                return Err(UsageError(format!("{what} measure needs n = 1")));
            }
            Ok(())
        };
        let density = match &self.measure {
            MeasureSpec::Triangular { nu0, t0, t1 } => {
                scalar("triangular")?;
                triangular_density(*nu0, dim, *t0, *t1, self.size)
            }
            MeasureSpec::White { t0, t1 } => white_noise_density(*t0, *t1, components, dim, self.size),
            MeasureSpec::Transformed { nu0, t0, t1, a0, a1, order } => {
                scalar("transformed")?;
                triangular_density(*nu0, dim, *t0, *t1, self.size)
                    .and_then(|q| transformed_density(&q, *a0, *a1, *order))
            }
            MeasureSpec::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(crystalstat_core::Error::from)
                    .and_then(|doc| SpectralDensity::from_document(&doc))
            }
        };
        let density = density.map_err(|e| UsageError(format!("measure: {e}")))?;
        let lat = density.lattice();
        if lat.dim != dim || lat.size != self.size || density.components() != components {
            return Err(UsageError(format!(
                "measure lives on {lat} with n = {}, experiment needs d = {dim}, L = {}, n = {components}",
                density.components(),
                self.size
            )));
        }
        Ok(density)
    }

    /// Gaussian density actually sampled, plus tanh amplitudes when the
    /// measure is transformed.
    pub fn sampled_density(&self, dim: usize, components: usize) -> Result<(SpectralDensity, Option<(f64, f64)>), UsageError> {
        match &self.measure {
            MeasureSpec::Transformed { nu0, t0, t1, a0, a1, .. } => {
                if components != 1 {
                    return Err(UsageError("transformed measure needs n = 1".into()));
                }
                let q = triangular_density(*nu0, dim, *t0, *t1, self.size).map_err(|e| UsageError(format!("measure: {e}")))?;
                Ok((q, Some((*a0, *a1))))
            }
            _ => Ok((self.initial_density(dim, components)?, None)),
        }
    }
}

/// Parse `d=1 n=1 m=1` (masses comma separated for `n > 1`).
pub fn parse_nn(words: &[String]) -> Result<KernelSpec, UsageError> {
    let (mut d, mut n, mut masses) = (1usize, 1usize, None::<Vec<f64>>);
    for w in words.iter().flat_map(|w| w.split_whitespace()) {
        let (key, value) = w.split_once('=').ok_or_else(|| UsageError(format!("--nn: expected key=value, got {w:?}")))?;
        let bad = |e: &dyn std::fmt::Display| UsageError(format!("--nn {key}: {e}"));
        match key {
            "d" => d = value.parse().map_err(|e| bad(&e))?,
            "n" => n = value.parse().map_err(|e| bad(&e))?,
            "m" => {
                masses = Some(value.split(',').map(|m| m.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| bad(&e))?)
            }
            _ => return Err(UsageError(format!("--nn: unknown key {key:?}"))),
        }
    }
    let masses = match masses {
        Some(m) if m.len() == 1 && n > 1 => vec![m[0]; n],
        Some(m) => m,
        None => vec![1.0; n],
    };
    Ok(KernelSpec::Nn { d, n, masses })
}
