//! Translation-invariant initial measures: spectral densities, Gaussian
//! spectral sampling and pointwise non-Gaussian transforms.

use std::num::NonZeroUsize;

use gauss_quad::GaussHermite;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::FieldState;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeFft};
use crate::linalg::{hermitian_eigen, max_abs, psd_factor, symmetric_eigen, to_complex, CMatrix, RMatrix, ZERO};
use crate::stats::empirical_covariance;

/// Per-eigenvalue clamp for roundoff negativity in matrix square roots.
pub const PSD_CLAMP: f64 = 1e-10;
/// Tolerance of the nodewise PSD invariant.
pub const PSD_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analytic(String),
    Empirical,
    Evolved { from: Box<Provenance>, time: f64 },
    Limit,
}

/// `q̂(θ)` as one Hermitian 2n×2n matrix per node, ordered
/// `[[q̂⁰⁰, q̂⁰¹], [q̂¹⁰, q̂¹¹]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    lattice: Lattice,
    components: usize,
    blocks: Vec<CMatrix>,
    excluded: Vec<bool>,
    pub provenance: Provenance,
}

impl SpectralDensity {
    pub fn new(lattice: Lattice, components: usize, blocks: Vec<CMatrix>, provenance: Provenance) -> Result<Self> {
        if blocks.len() != lattice.len() {
            return Err(Error::LatticeMismatch(format!("{} blocks for {} nodes", blocks.len(), lattice.len())));
        }
        if blocks.iter().any(|b| b.nrows() != 2 * components || b.ncols() != 2 * components) {
            return Err(Error::InvalidParameter(format!("blocks must be {0}x{0}", 2 * components)));
        }
        let excluded = vec![false; blocks.len()];
        Ok(Self { lattice, components, blocks, excluded, provenance })
    }

    pub fn zeros(lattice: Lattice, components: usize, provenance: Provenance) -> Self {
        let m = 2 * components;
        Self {
            lattice,
            components,
            blocks: vec![CMatrix::zeros(m, m); lattice.len()],
            excluded: vec![false; lattice.len()],
            provenance,
        }
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn block(&self, node: usize) -> &CMatrix {
        &self.blocks[node]
    }

    pub fn blocks(&self) -> &[CMatrix] {
        &self.blocks
    }

    /// Sub-block `q̂^{ij}` at a node.
    pub fn sub_block(&self, node: usize, i: usize, j: usize) -> CMatrix {
        crate::linalg::block(&self.blocks[node], i, j)
    }

    pub fn is_excluded(&self, node: usize) -> bool {
        self.excluded[node]
    }

    pub fn excluded_flags(&self) -> &[bool] {
        &self.excluded
    }

    pub fn excluded_fraction(&self) -> f64 {
        self.excluded.iter().filter(|&&e| e).count() as f64 / self.excluded.len() as f64
    }

    pub fn with_excluded(mut self, excluded: Vec<bool>) -> Result<Self> {
        if excluded.len() != self.blocks.len() {
            return Err(Error::LatticeMismatch("exclusion mask length".into()));
        }
        self.excluded = excluded;
        Ok(self)
    }

    /// Apply `f` to every node, keeping the exclusion mask.
    pub fn map_nodes(&self, provenance: Provenance, f: impl Fn(usize, &CMatrix) -> CMatrix + Sync) -> Self {
        let blocks = self.blocks.par_iter().enumerate().map(|(i, b)| f(i, b)).collect();
        Self { blocks, provenance, ..self.clone() }
    }

    /// Node and least eigenvalue of the worst node.
    pub fn least_eigenvalue(&self) -> (usize, f64) {
        self.blocks
            .par_iter()
            .enumerate()
            .map(|(i, b)| (i, hermitian_eigen(b).0[0]))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("non-empty grid")
    }

    pub fn check_psd(&self, tol: f64) -> Result<()> {
        let (node, value) = self.least_eigenvalue();
        if value < -tol {
            return Err(Error::NotPsd { node, value });
        }
        Ok(())
    }

    pub fn hermitian_defect(&self) -> f64 {
        self.blocks.iter().map(|b| max_abs(&(b - b.adjoint()))).fold(0.0, f64::max)
    }

    /// `max |q̂(-θ) - conj q̂(θ)|`.
    pub fn reality_defect(&self) -> f64 {
        (0..self.lattice.len())
            .map(|i| max_abs(&(&self.blocks[self.lattice.conj_index(i)] - self.blocks[i].conjugate())))
            .fold(0.0, f64::max)
    }

    /// Real-space correlation `q(z) = N⁻¹ Σ_θ e^{-izθ} q̂(θ)`, one 2n×2n
    /// matrix per site, together with the largest discarded imaginary part.
    pub fn to_correlation(&self) -> (Vec<RMatrix>, f64) {
        let fft = LatticeFft::new(self.lattice);
        let m = 2 * self.components;
        let mut out = vec![RMatrix::zeros(m, m); self.lattice.len()];
        let mut residue: f64 = 0.0;
        for r in 0..m {
            for c in 0..m {
                let mut buf: Vec<Complex64> = self.blocks.iter().map(|b| b[(r, c)]).collect();
                fft.inverse(&mut buf);
                for (x, z) in buf.iter().enumerate() {
                    residue = residue.max(z.im.abs());
                    out[x][(r, c)] = z.re;
                }
            }
        }
        (out, residue)
    }

    /// `q̂(θ) = Σ_z q(z) e^{izθ}` from one real 2n×2n matrix per site.
    pub fn from_correlation(lattice: Lattice, components: usize, q: &[RMatrix], provenance: Provenance) -> Result<Self> {
        let m = 2 * components;
        if q.len() != lattice.len() || q.iter().any(|b| b.nrows() != m || b.ncols() != m) {
            return Err(Error::LatticeMismatch("correlation array does not match lattice".into()));
        }
        let fft = LatticeFft::new(lattice);
        let mut blocks = vec![CMatrix::zeros(m, m); lattice.len()];
        for r in 0..m {
            for c in 0..m {
                let mut buf: Vec<Complex64> = q.iter().map(|b| Complex64::new(b[(r, c)], 0.0)).collect();
                fft.forward(&mut buf);
                for (k, z) in buf.into_iter().enumerate() {
                    blocks[k][(r, c)] = z;
                }
            }
        }
        for b in &mut blocks {
            crate::linalg::hermitize(b);
        }
        Self::new(lattice, components, blocks, provenance)
    }

    /// Energy density `tr q⁰⁰(0) + tr q¹¹(0)` by the Parseval θ-sum.
    pub fn energy_density(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace().re).sum::<f64>() / self.lattice.len() as f64
    }

    pub fn to_document(&self) -> DensityDocument {
        DensityDocument {
            d: self.lattice.dim,
            n: self.components,
            size: self.lattice.size,
            provenance: self.provenance.clone(),
            excluded: self.excluded.clone(),
            nodes: self
                .blocks
                .iter()
                .map(|b| NodeMatrix {
                    re: (0..b.nrows()).map(|i| b.row(i).iter().map(|z| z.re).collect()).collect(),
                    im: (0..b.nrows()).map(|i| b.row(i).iter().map(|z| z.im).collect()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &DensityDocument) -> Result<Self> {
        let lattice = Lattice::new(doc.d, doc.size)?;
        let m = 2 * doc.n;
        let blocks = doc
            .nodes
            .iter()
            .map(|node| {
                if node.re.len() != m || node.im.len() != m || node.re.iter().chain(&node.im).any(|r| r.len() != m) {
                    return Err(Error::InvalidParameter(format!("node matrices must be {m}x{m}")));
                }
                Ok(CMatrix::from_fn(m, m, |i, j| Complex64::new(node.re[i][j], node.im[i][j])))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(lattice, doc.n, blocks, doc.provenance.clone())?.with_excluded(if doc.excluded.is_empty() {
            vec![false; lattice.len()]
        } else {
            doc.excluded.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityDocument {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "L")]
    pub size: usize,
    pub provenance: Provenance,
    #[serde(default)]
    pub excluded: Vec<bool>,
    pub nodes: Vec<NodeMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeMatrix {
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

/// `f̂(θ) = Σ_{|z|<ν₀} (ν₀-|z|) e^{izθ} = (1 - cos ν₀θ)/(1 - cos θ)`.
pub fn triangular_symbol(nu0: usize, theta: f64) -> f64 {
    let nu = nu0 as f64;
    nu + 2.0 * (1..nu0).map(|z| (nu - z as f64) * (z as f64 * theta).cos()).sum::<f64>()
}

/// Scalar field with correlation `T^i Π_j max(ν₀-|z_j|, 0)` in `u` and `v`.
pub fn triangular_density(nu0: usize, dim: usize, t0: f64, t1: f64, size: usize) -> Result<SpectralDensity> {
    if nu0 == 0 {
        return Err(Error::InvalidParameter("nu0 must be >= 1".into()));
    }
    if !(t0 >= 0.0 && t1 >= 0.0) {
        return Err(Error::InvalidParameter("temperatures must be nonnegative".into()));
    }
    let lattice = Lattice::new(dim, size)?;
    if 2 * nu0 > size {
        return Err(Error::InvalidParameter(format!("nu0 = {nu0} does not fit in L = {size}")));
    }
    let blocks = (0..lattice.len())
        .map(|i| {
            let f: f64 = lattice.theta(i).iter().map(|&t| triangular_symbol(nu0, t)).product();
            let c = |v: f64| Complex64::new(v, 0.0);
            CMatrix::from_row_slice(2, 2, &[c(t0 * f), ZERO, ZERO, c(t1 * f)])
        })
        .collect();
    SpectralDensity::new(lattice, 1, blocks, Provenance::Analytic(format!("triangular nu0={nu0}")))
}

/// `q̂⁰⁰ = T⁰ I`, `q̂¹¹ = T¹ I`, constant in θ.
pub fn white_noise_density(t0: f64, t1: f64, components: usize, dim: usize, size: usize) -> Result<SpectralDensity> {
    if !(t0 >= 0.0 && t1 >= 0.0) {
        return Err(Error::InvalidParameter("temperatures must be nonnegative".into()));
    }
    if components == 0 {
        return Err(Error::InvalidParameter("n must be positive".into()));
    }
    let lattice = Lattice::new(dim, size)?;
    let n = components;
    let block = CMatrix::from_fn(2 * n, 2 * n, |i, j| {
        if i != j {
            ZERO
        } else if i < n {
            Complex64::new(t0, 0.0)
        } else {
            Complex64::new(t1, 0.0)
        }
    });
    SpectralDensity::new(lattice, n, vec![block; lattice.len()], Provenance::Analytic("white noise".into()))
}

/// Spectral sampler for the Gaussian measure with density `q̂`: per node a
/// factor `S` with `S S* = q̂`, real at self-conjugate nodes.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    lattice: Lattice,
    components: usize,
    representatives: Vec<usize>,
    factors: Vec<CMatrix>,
    fft: LatticeFft,
}

/// Words of generator output reserved per θ-node.
const NODE_STRIDE: u128 = 1 << 20;

impl GaussianSampler {
    pub fn new(density: &SpectralDensity) -> Result<Self> {
        let lattice = density.lattice();
        let representatives = lattice.conjugate_representatives();
        let factors = representatives
            .par_iter()
            .map(|&node| {
                let q = density.block(node);
                if lattice.is_self_conjugate(node) {
                    let (values, vectors) = symmetric_eigen(&q.map(|z| z.re));
                    if values[0] < -PSD_CLAMP {
                        return Err(Error::NotPsd { node, value: values[0] });
                    }
                    let mut s = vectors;
                    for (j, v) in values.iter().enumerate() {
                        s.column_mut(j).scale_mut(v.max(0.0).sqrt());
                    }
                    Ok(to_complex(&s))
                } else {
                    psd_factor(q, PSD_CLAMP).map_err(|value| Error::NotPsd { node, value })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lattice, components: density.components(), representatives, factors, fft: LatticeFft::new(lattice) })
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    /// Sample number `index` of the ensemble keyed by `seed`. Node `k` draws
    /// from its own block of the `(seed, index)` stream.
    pub fn sample(&self, seed: u64, index: u64) -> Result<FieldState> {
        let m = 2 * self.components;
        let sites = self.lattice.len();
        let scale = (sites as f64).sqrt();
        let mut data = vec![vec![ZERO; sites]; m];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let mut z = vec![ZERO; m];
        for (&node, s) in self.representatives.iter().zip(&self.factors) {
            rng.set_word_pos(node as u128 * NODE_STRIDE);
            let real = self.lattice.is_self_conjugate(node);
            for slot in z.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *slot = if real {
                    Complex64::new(x, 0.0)
                } else {
                    let y: f64 = StandardNormal.sample(&mut rng);
                    Complex64::new(x, y) * std::f64::consts::FRAC_1_SQRT_2
                };
            }
            let conj = self.lattice.conj_index(node);
            for c in 0..m {
                let mut acc = ZERO;
                for k in 0..m {
                    acc += s[(c, k)] * z[k];
                }
                acc *= scale;
                data[c][node] = acc;
                if conj != node {
                    data[c][conj] = acc.conj();
                }
            }
        }
        FieldState::from_fourier(data, &self.fft, 0.0)
    }

    pub fn ensemble(&self, seed: u64, count: usize) -> Result<Vec<FieldState>> {
        (0..count as u64).into_par_iter().map(|i| self.sample(seed, i)).collect()
    }
}

/// One Gaussian field with spectral density `q̂`, deterministic in `seed`.
pub fn gaussian_sample(density: &SpectralDensity, seed: u64) -> Result<FieldState> {
    GaussianSampler::new(density)?.sample(seed, 0)
}

/// `u ↦ a⁰ tanh(u/a⁰)`, `v ↦ a¹ tanh(v/a¹)` pointwise.
pub fn nonlinear_transform_sample(state: &FieldState, a0: f64, a1: f64) -> Result<FieldState> {
    if !(a0 > 0.0 && a1 > 0.0) || !a0.is_finite() || !a1.is_finite() {
        return Err(Error::InvalidParameter(format!("amplitudes ({a0}, {a1}) must be positive")));
    }
    let f = |a: f64| move |y: &f64| a * (y / a).tanh();
    Ok(FieldState {
        u: state.u.iter().map(f(a0)).collect(),
        v: state.v.iter().map(f(a1)).collect(),
        ..state.clone()
    })
}

/// `E[f(X) g(Y)]` for centred jointly Gaussian `(X, Y)` with the given
/// variances and covariance, by tensor Gauss-Hermite quadrature.
pub fn gaussian_pair_expectation(
    rule: &GaussHermite,
    var_x: f64,
    var_y: f64,
    cov: f64,
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
) -> f64 {
    let sx = var_x.max(0.0).sqrt();
    let sy = var_y.max(0.0).sqrt();
    if sx == 0.0 || sy == 0.0 {
        return f(0.0) * g(0.0);
    }
    let rho = (cov / (sx * sy)).clamp(-1.0, 1.0);
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    let root2 = std::f64::consts::SQRT_2;
    let pairs = rule.as_node_weight_pairs();
    let mut total = 0.0;
    for &(x1, w1) in pairs {
        let z1 = root2 * x1;
        let fx = f(sx * z1);
        let mut inner = 0.0;
        for &(x2, w2) in pairs {
            let z2 = root2 * x2;
            inner += w2 * g(sy * (rho * z1 + tail * z2));
        }
        total += w1 * fx * inner;
    }
    total / std::f64::consts::PI
}

/// Spectral density of the tanh-transformed Gaussian field with density
/// `q̂`: every real-space entry `q^{cd}(z)` is replaced by
/// `E[f_c(Y_c(z)) f_d(Y_d(0))]`.
pub fn transformed_density(density: &SpectralDensity, a0: f64, a1: f64, order: usize) -> Result<SpectralDensity> {
    if !(a0 > 0.0 && a1 > 0.0) {
        return Err(Error::InvalidParameter(format!("amplitudes ({a0}, {a1}) must be positive")));
    }
    let order = NonZeroUsize::new(order).ok_or_else(|| Error::InvalidParameter("quadrature order 0".into()))?;
    let rule = GaussHermite::new(order);
    let n = density.components();
    let m = 2 * n;
    let (q, _) = density.to_correlation();
    let amp = |c: usize| if c < n { a0 } else { a1 };
    let var: Vec<f64> = (0..m).map(|c| q[0][(c, c)]).collect();
    let transformed: Vec<RMatrix> = q
        .par_iter()
        .map(|qz| {
            RMatrix::from_fn(m, m, |c, d| {
                let (ac, ad) = (amp(c), amp(d));
                gaussian_pair_expectation(
                    &rule,
                    var[c],
                    var[d],
                    qz[(c, d)],
                    |x| ac * (x / ac).tanh(),
                    |y| ad * (y / ad).tanh(),
                )
            })
        })
        .collect();
    SpectralDensity::from_correlation(
        density.lattice(),
        n,
        &transformed,
        Provenance::Analytic(format!("tanh transform a0={a0} a1={a1}")),
    )
}

/// Support-radius surrogate for the mixing coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingSupport {
    pub radius: f64,
    pub r_max: f64,
    pub samples: usize,
    /// Largest `|q|/σ` over entries, per probed offset.
    pub offsets: Vec<OffsetSignificance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub declared: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consistent: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetSignificance {
    pub offset: Vec<i64>,
    pub length: f64,
    pub max_z: f64,
}

impl MixingSupport {
    /// Compare with a declared correlation radius.
    pub fn against(mut self, declared: f64) -> Self {
        self.declared = Some(declared);
        self.consistent = Some(self.radius <= declared);
        self
    }
}

/// Smallest `r` such that every empirical `|q^{ij}(z)|` with `|z| > r`,
/// `|z| ≤ r_max`, lies below three standard errors.
pub fn empirical_mixing_support(ensemble: &[FieldState], r_max: f64) -> Result<MixingSupport> {
    if ensemble.len() < 100 {
        return Err(Error::EnsembleTooSmall { got: ensemble.len(), need: 100 });
    }
    let lat = ensemble[0].lattice;
    let offsets: Vec<Vec<i64>> = (0..lat.len())
        .filter(|&x| lat.torus_norm(x) <= r_max)
        .map(|x| lat.minimal_image(x))
        .collect();
    let summary = empirical_covariance(ensemble, &offsets)?;
    let mut radius: f64 = 0.0;
    let mut report = Vec::new();
    for entry in &summary.covariances {
        let length = entry.offset.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt();
        let max_z = entry
            .mean
            .iter()
            .zip(entry.stderr.iter())
            .map(|(m, s)| if *s > 0.0 { m.abs() / s } else if *m != 0.0 { f64::INFINITY } else { 0.0 })
            .fold(0.0, f64::max);
        if max_z >= 3.0 {
            radius = radius.max(length);
        }
        report.push(OffsetSignificance { offset: entry.offset.clone(), length, max_z });
    }
    Ok(MixingSupport { radius, r_max, samples: ensemble.len(), offsets: report, declared: None, consistent: None })
}
