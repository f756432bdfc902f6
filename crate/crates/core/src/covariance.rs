//! Covariance dynamics in Fourier form, the limit density by spectral
//! projections, the Gibbs density, quadratic forms and the mixing integral.

use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::propagator_block;
use crate::error::{Error, Result};
use crate::fields::{Provenance, SpectralDensity};
use crate::lattice::Lattice;
use crate::linalg::{block, block2, CMatrix, RMatrix, ZERO};
use crate::report::Verdict;
use crate::spectral::{check_es, DispersionGrid, SpectralPoint};

/// Largest excluded-node fraction for which a limit is declared valid.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

/// Finitely supported test field with `2n` components per site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub components: usize,
    /// `(site offset, values of (u, v) components)`.
    pub support: Vec<(Vec<i64>, Vec<f64>)>,
}

impl TestFunction {
    pub fn new(components: usize, support: Vec<(Vec<i64>, Vec<f64>)>) -> Result<Self> {
        if support.iter().any(|(_, v)| v.len() != 2 * components) {
            return Err(Error::InvalidParameter(format!("test values must have {} components", 2 * components)));
        }
        Ok(Self { components, support })
    }

    pub fn zero(components: usize) -> Self {
        Self { components, support: Vec::new() }
    }

    /// Unit weight on component `c` (`c < 2n`) at `site`.
    pub fn delta(dim: usize, components: usize, site: Vec<i64>, c: usize) -> Self {
        assert_eq!(site.len(), dim);
        let mut values = vec![0.0; 2 * components];
        values[c] = 1.0;
        Self { components, support: vec![(site, values)] }
    }

    /// Unit weight on every component at the origin.
    pub fn full_delta(dim: usize, components: usize) -> Self {
        Self { components, support: vec![(vec![0; dim], vec![1.0; 2 * components])] }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            components: self.components,
            support: self.support.iter().map(|(x, v)| (x.clone(), v.iter().map(|p| a * p).collect())).collect(),
        }
    }

    /// Site indices of the support; every coordinate must lie in `(-L/2, L/2]`.
    pub fn sites(&self, lattice: &Lattice) -> Result<Vec<usize>> {
        let half = lattice.size as i64 / 2;
        self.support
            .iter()
            .map(|(x, _)| {
                if x.len() != lattice.dim || x.iter().any(|&c| c <= -half || c > half) {
                    return Err(Error::InvalidParameter(format!("test support {x:?} overflows {lattice}")));
                }
                Ok(lattice.wrap(x))
            })
            .collect()
    }

    /// `Ψ̂(θ) = Σ_x Ψ(x) e^{ixθ}` per node.
    pub fn fourier(&self, lattice: &Lattice) -> Result<Vec<DVector<Complex64>>> {
        self.sites(lattice)?;
        let m = 2 * self.components;
        Ok((0..lattice.len())
            .into_par_iter()
            .map(|k| {
                let th = lattice.theta(k);
                let mut out = DVector::from_element(m, ZERO);
                for (x, v) in &self.support {
                    let phase: f64 = x.iter().zip(&th).map(|(&a, &b)| a as f64 * b).sum();
                    let e = Complex64::from_polar(1.0, phase);
                    for c in 0..m {
                        out[c] += e * v[c];
                    }
                }
                out
            })
            .collect())
    }
}

fn check_shapes(density: &SpectralDensity, points: &[SpectralPoint]) -> Result<()> {
    if density.lattice().len() != points.len() || density.components() != points[0].components() {
        return Err(Error::LatticeMismatch("density and spectral grid differ".into()));
    }
    Ok(())
}

/// `q̂_t = Ĝ(t) q̂₀ Ĝ(t)*` per node.
pub fn evolve_density(q0: &SpectralDensity, grid: &DispersionGrid, t: f64) -> Result<SpectralDensity> {
    evolve_density_points(q0, grid.points(), t)
}

pub fn evolve_density_points(q0: &SpectralDensity, points: &[SpectralPoint], t: f64) -> Result<SpectralDensity> {
    check_shapes(q0, points)?;
    let prov = Provenance::Evolved { from: Box::new(q0.provenance.clone()), time: t };
    Ok(q0.map_nodes(prov, |i, q| {
        let g = propagator_block(&points[i], t);
        let mut out = &g * q * g.adjoint();
        crate::linalg::hermitize(&mut out);
        out
    }))
}

/// `q̂_∞ = Σ_σ Π_σ M₀ Π_σ` blockwise, with
/// `M₀ = ½[[q⁰⁰ + Ω⁻¹q¹¹Ω⁻¹, q⁰¹ - Ω⁻¹q¹⁰Ω], [q¹⁰ - Ωq⁰¹Ω⁻¹, q¹¹ + Ωq⁰⁰Ω]]`.
pub fn limit_map(point: &SpectralPoint, q: &CMatrix, delta_null: f64) -> CMatrix {
    let om = point.omega_matrix();
    let inv = point.omega_pinv(delta_null);
    let (q00, q01, q10, q11) = (block(q, 0, 0), block(q, 0, 1), block(q, 1, 0), block(q, 1, 1));
    let half = Complex64::new(0.5, 0.0);
    let m00 = (&q00 + &inv * &q11 * &inv) * half;
    let m01 = (&q01 - &inv * &q10 * &om) * half;
    let m10 = (&q10 - &om * &q01 * &inv) * half;
    let m11 = (&q11 + &om * &q00 * &om) * half;
    let project = |m: &CMatrix| -> CMatrix {
        if point.projections.len() == 1 {
            return m.clone();
        }
        point.projections.iter().map(|p| p * m * p).fold(CMatrix::zeros(m.nrows(), m.ncols()), |a, b| a + b)
    };
    let mut out = block2(&project(&m00), &project(&m01), &project(&m10), &project(&m11));
    crate::linalg::hermitize(&mut out);
    out
}

#[derive(Clone, Debug)]
pub struct LimitDensity {
    pub density: SpectralDensity,
    /// Clusters used at each node.
    pub clusters: Vec<Vec<Vec<usize>>>,
    pub c0_fraction: f64,
}

impl LimitDensity {
    pub fn excluded_fraction(&self) -> f64 {
        self.density.excluded_fraction()
    }

    pub fn is_valid(&self) -> bool {
        self.excluded_fraction() < MAX_EXCLUDED_FRACTION
    }
}

fn c0_mask(grid: &DispersionGrid) -> Vec<bool> {
    let null = grid.thresholds().delta_null;
    grid.points().iter().map(|p| p.is_singular(null)).collect()
}

/// Limit density of the covariance flow; `C_0` nodes are computed with the
/// pseudoinverse and marked excluded.
pub fn limit_density(q0: &SpectralDensity, grid: &DispersionGrid) -> Result<LimitDensity> {
    check_shapes(q0, grid.points())?;
    let es = check_es(grid, q0)?;
    let excluded = c0_mask(grid);
    let c0_fraction = excluded.iter().filter(|&&e| e).count() as f64 / excluded.len() as f64;
    if es.verdict == Verdict::Fail && c0_fraction > 0.0 {
        return Err(Error::EsFailed { c0_fraction });
    }
    let null = grid.thresholds().delta_null;
    let points = grid.points();
    let density = q0.map_nodes(Provenance::Limit, |i, q| limit_map(&points[i], q, null)).with_excluded(excluded)?;
    Ok(LimitDensity { density, clusters: points.iter().map(|p| p.clusters.clone()).collect(), c0_fraction })
}

/// `(T₁/2)·diag(V̂⁻¹, I)`; `C_0` nodes carry the pseudoinverse and are excluded.
pub fn gibbs_density(t1: f64, grid: &DispersionGrid) -> Result<LimitDensity> {
    if !(t1 >= 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {t1} must be nonnegative")));
    }
    let null = grid.thresholds().delta_null;
    let n = grid.components();
    let excluded = c0_mask(grid);
    let c0_fraction = excluded.iter().filter(|&&e| e).count() as f64 / excluded.len() as f64;
    let half = Complex64::new(t1 / 2.0, 0.0);
    let blocks = grid
        .points()
        .par_iter()
        .map(|p| {
            let zero = CMatrix::zeros(n, n);
            block2(&(p.symbol_pinv(null) * half), &zero, &zero, &(CMatrix::identity(n, n) * half))
        })
        .collect();
    let density = SpectralDensity::new(grid.lattice(), n, blocks, Provenance::Limit)?.with_excluded(excluded)?;
    Ok(LimitDensity { density, clusters: grid.points().iter().map(|p| p.clusters.clone()).collect(), c0_fraction })
}

/// Real-space values `q(z)` at selected offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceTable {
    pub offsets: Vec<Vec<i64>>,
    pub values: Vec<Vec<Vec<f64>>>,
    /// Fraction of θ-nodes left out of the quadrature.
    pub excluded_fraction: f64,
}

impl CovarianceTable {
    pub fn matrix(&self, k: usize) -> RMatrix {
        let m = self.values[k].len();
        RMatrix::from_fn(m, m, |i, j| self.values[k][i][j])
    }
}

/// `q(z) = N⁻¹ Σ_θ e^{-izθ} q̂(θ)` over non-excluded nodes.
pub fn covariance_at(density: &SpectralDensity, z: &[i64]) -> RMatrix {
    let lat = density.lattice();
    let m = 2 * density.components();
    let mut acc = CMatrix::zeros(m, m);
    for k in 0..lat.len() {
        if density.is_excluded(k) {
            continue;
        }
        let th = lat.theta(k);
        let phase: f64 = z.iter().zip(&th).map(|(&a, &b)| a as f64 * b).sum();
        acc += density.block(k) * Complex64::from_polar(1.0, -phase);
    }
    acc.map(|c| c.re / lat.len() as f64)
}

pub fn covariance_from_density(density: &SpectralDensity, offsets: &[Vec<i64>]) -> CovarianceTable {
    let values = offsets
        .par_iter()
        .map(|z| {
            let q = covariance_at(density, z);
            (0..q.nrows()).map(|i| q.row(i).iter().copied().collect()).collect()
        })
        .collect();
    CovarianceTable { offsets: offsets.to_vec(), values, excluded_fraction: density.excluded_fraction() }
}

/// `Q(Ψ,Ψ)` summed in real space over the support and by Parseval over the
/// θ-grid; the two must agree to `1e-8` relative.
pub fn quadratic_form(density: &SpectralDensity, psi: &TestFunction) -> Result<f64> {
    let (real_space, fourier) = quadratic_form_routes(density, psi)?;
    if (real_space - fourier).abs() > 1e-8 * (1.0 + fourier.abs()) {
        return Err(Error::ParsevalMismatch { real_space, fourier });
    }
    Ok(fourier)
}

/// Both evaluations of `Q(Ψ,Ψ)`: `(real space, Fourier)`.
pub fn quadratic_form_routes(density: &SpectralDensity, psi: &TestFunction) -> Result<(f64, f64)> {
    let lat = density.lattice();
    if psi.components != density.components() {
        return Err(Error::InvalidParameter("test function has the wrong number of components".into()));
    }
    if psi.support.is_empty() {
        return Ok((0.0, 0.0));
    }
    psi.sites(&lat)?;
    let mut real_space = 0.0;
    for (x, px) in &psi.support {
        for (y, py) in &psi.support {
            let z: Vec<i64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let q = covariance_at(density, &z);
            for a in 0..px.len() {
                for b in 0..py.len() {
                    real_space += px[a] * q[(a, b)] * py[b];
                }
            }
        }
    }
    let hat = psi.fourier(&lat)?;
    let fourier = parseval_sum(density, &hat, &hat, None);
    Ok((real_space, fourier))
}

/// `N⁻¹ Σ_θ Ψ̂₁(θ)* M(θ) Ψ̂₂(θ)` over non-excluded nodes with
/// `M = Ĝ(t) q̂` when `evolution` is given, else `M = q̂`.
fn parseval_sum(
    density: &SpectralDensity,
    a: &[DVector<Complex64>],
    b: &[DVector<Complex64>],
    evolution: Option<(&[SpectralPoint], f64)>,
) -> f64 {
    let lat = density.lattice();
    let total: Complex64 = (0..lat.len())
        .into_par_iter()
        .filter(|&k| !density.is_excluded(k))
        .map(|k| {
            let q = density.block(k);
            let m = match evolution {
                Some((points, t)) => propagator_block(&points[k], t) * q,
                None => q.clone(),
            };
            (a[k].adjoint() * m * &b[k])[(0, 0)]
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    total.re / lat.len() as f64
}

/// `E_∞⟨U(t)Y, Ψ₁⟩⟨Y, Ψ₂⟩ = N⁻¹ Σ_θ Ψ̂₁* Ĝ(t) q̂_∞ Ψ̂₂` over non-excluded nodes.
pub fn mixing_integral(
    limit: &LimitDensity,
    grid: &DispersionGrid,
    psi1: &TestFunction,
    psi2: &TestFunction,
    t: f64,
) -> Result<f64> {
    let density = &limit.density;
    check_shapes(density, grid.points())?;
    if psi1.support.is_empty() || psi2.support.is_empty() {
        return Ok(0.0);
    }
    let lat = density.lattice();
    let a = psi1.fourier(&lat)?;
    let b = psi2.fourier(&lat)?;
    Ok(parseval_sum(density, &a, &b, Some((grid.points(), t))))
}

/// One line of a convergence table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub t: f64,
    pub z: Vec<i64>,
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub q_t: f64,
    pub q_inf: f64,
}

/// Rows comparing `q_t(z)` with `q_∞(z)` for every block entry.
pub fn convergence_rows(t: f64, offsets: &[Vec<i64>], q_t: &CovarianceTable, q_inf: &CovarianceTable) -> Vec<ConvergenceRow> {
    let mut rows = Vec::new();
    for (idx, z) in offsets.iter().enumerate() {
        let (a, b) = (q_t.matrix(idx), q_inf.matrix(idx));
        let n = a.nrows() / 2;
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                rows.push(ConvergenceRow {
                    t,
                    z: z.clone(),
                    i: r / n,
                    j: c / n,
                    k: r % n,
                    l: c % n,
                    q_t: a[(r, c)],
                    q_inf: b[(r, c)],
                });
            }
        }
    }
    rows
}

/// CSV with columns `t,z,i,j,k,l,q_t,q_inf,abs_diff`; offsets joined by `;`.
pub fn write_convergence_csv(rows: &[ConvergenceRow], out: &mut impl Write) -> Result<()> {
    writeln!(out, "t,z,i,j,k,l,q_t,q_inf,abs_diff")?;
    for r in rows {
        let z: Vec<String> = r.z.iter().map(|c| c.to_string()).collect();
        writeln!(
            out,
            "{},{},{},{},{},{},{:.15e},{:.15e},{:.6e}",
            r.t,
            z.join(";"),
            r.i,
            r.j,
            r.k,
            r.l,
            r.q_t,
            r.q_inf,
            (r.q_t - r.q_inf).abs()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{triangular_density, white_noise_density};
    use crate::kernel::{build_nn_kernel, random_finite_range_kernel, InteractionKernel};
    use crate::linalg::{c, max_abs};
    use crate::spectral::Thresholds;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(k: &InteractionKernel, l: usize) -> DispersionGrid {
        DispersionGrid::new(k, l, Thresholds::default()).unwrap()
    }

    fn onsite(m2: f64) -> InteractionKernel {
        InteractionKernel::new(1, 1, 1, vec![(vec![0], RMatrix::from_element(1, 1, m2))]).unwrap()
    }

    #[test]
    fn evolve_density_examples() {
        let k = onsite(4.0);
        let g = grid(&k, 16);
        let q0 = white_noise_density(1.0, 0.0, 1, 1, 16).unwrap();
        assert_eq!(evolve_density(&q0, &g, 0.0).unwrap().blocks(), q0.blocks());
        let t = 1.3;
        let qt = evolve_density(&q0, &g, t).unwrap();
        for b in qt.blocks() {
            assert!((b[(0, 0)].re - (2.0 * t).cos().powi(2)).abs() < 1e-14);
        }
    }

    #[test]
    fn evolve_density_stays_psd() {
        let k = random_finite_range_kernel(1, 2, 2, 5, true).unwrap();
        let g = grid(&k, 32);
        let q0 = white_noise_density(1.0, 2.0, 2, 1, 32).unwrap();
        for t in [0.5, 7.0, 33.0] {
            evolve_density(&q0, &g, t).unwrap().check_psd(1e-8).unwrap();
        }
    }

    #[test]
    fn scalar_limit_matches_closed_form() {
        let k = build_nn_kernel(1, 1, &[1.0]).unwrap();
        let g = grid(&k, 64);
        let q0 = triangular_density(3, 1, 1.0, 2.0, 64).unwrap();
        let lim = limit_density(&q0, &g).unwrap();
        for i in 0..64 {
            let w2 = 3.0 - 2.0 * g.lattice().theta(i)[0].cos();
            let q = q0.block(i);
            let want00 = 0.5 * (q[(0, 0)].re + q[(1, 1)].re / w2);
            let want11 = 0.5 * (q[(1, 1)].re + w2 * q[(0, 0)].re);
            let b = lim.density.block(i);
            assert!((b[(0, 0)].re - want00).abs() < 1e-12);
            assert!((b[(1, 1)].re - want11).abs() < 1e-12);
        }
    }

    #[test]
    fn gibbs_agrees_with_white_noise_limit() {
        let k = random_finite_range_kernel(1, 2, 1, 8, true).unwrap();
        let g = grid(&k, 32);
        let wn = white_noise_density(0.0, 1.7, 2, 1, 32).unwrap();
        let lim = limit_density(&wn, &g).unwrap();
        let gib = gibbs_density(1.7, &g).unwrap();
        for (a, b) in lim.density.blocks().iter().zip(gib.density.blocks()) {
            assert!(max_abs(&(a - b)) < 1e-10 * (1.0 + max_abs(b)), "{} vs {}", max_abs(&(a - b)), max_abs(b));
        }
        let again = limit_density(&gib.density, &g).unwrap();
        for (a, b) in again.density.blocks().iter().zip(gib.density.blocks()) {
            assert!(max_abs(&(a - b)) < 1e-8);
        }
        let zero = gibbs_density(0.0, &g).unwrap();
        assert!(zero.density.blocks().iter().all(|b| max_abs(b) == 0.0));
        let m = gibbs_density(2.0, &grid(&onsite(4.0), 16)).unwrap();
        assert!((m.density.block(3)[(0, 0)] - c(0.25)).norm() < 1e-15);
    }

    #[test]
    fn limit_is_stationary() {
        let k = random_finite_range_kernel(1, 2, 2, 13, true).unwrap();
        let g = grid(&k, 32);
        let q0 = white_noise_density(0.4, 1.1, 2, 1, 32).unwrap();
        let lim = limit_density(&q0, &g).unwrap();
        for t in [1.0, 7.3] {
            let qt = evolve_density(&lim.density, &g, t).unwrap();
            for (a, b) in qt.blocks().iter().zip(lim.density.blocks()) {
                assert!(max_abs(&(a - b)) < 1e-8);
            }
        }
    }

    #[test]
    fn massless_limit_excludes_origin() {
        let k = build_nn_kernel(3, 1, &[0.0]).unwrap();
        let g = grid(&k, 16);
        let gib = gibbs_density(1.0, &g).unwrap();
        assert!(gib.density.is_excluded(0));
        assert_eq!(gib.excluded_fraction(), 1.0 / 4096.0);
        assert!(gib.is_valid());

        let k1 = build_nn_kernel(1, 1, &[0.0]).unwrap();
        let g1 = grid(&k1, 256);
        let wn = white_noise_density(1.0, 1.0, 1, 1, 256).unwrap();
        assert!(matches!(limit_density(&wn, &g1), Err(Error::EsFailed { .. })));
    }

    #[test]
    fn covariance_examples() {
        let w = white_noise_density(2.0, 3.0, 1, 1, 32).unwrap();
        let tab = covariance_from_density(&w, &[vec![0], vec![1], vec![-4]]);
        assert!((tab.matrix(0) - RMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])).abs().max() < 1e-12);
        assert!(tab.matrix(1).abs().max() < 1e-12 && tab.matrix(2).abs().max() < 1e-12);

        let t = triangular_density(2, 1, 1.0, 0.5, 32).unwrap();
        let tab = covariance_from_density(&t, &[vec![0], vec![1], vec![2], vec![3]]);
        let hat = [2.0, 1.0, 0.0, 0.0];
        for (k, h) in hat.iter().enumerate() {
            assert!((tab.matrix(k)[(0, 0)] - h).abs() < 1e-10);
            assert!((tab.matrix(k)[(1, 1)] - 0.5 * h).abs() < 1e-10);
        }

        let kk = random_finite_range_kernel(1, 2, 2, 2, true).unwrap();
        let g = grid(&kk, 32);
        let qt = evolve_density(&white_noise_density(1.0, 0.5, 2, 1, 32).unwrap(), &g, 3.0).unwrap();
        for z in 1..5 {
            let a = covariance_at(&qt, &[z]);
            let b = covariance_at(&qt, &[-z]);
            assert!((a - b.transpose()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn quadratic_form_examples() {
        let w = white_noise_density(1.0, 1.0, 1, 1, 32).unwrap();
        assert_eq!(quadratic_form(&w, &TestFunction::zero(1)).unwrap(), 0.0);
        let q = quadratic_form(&w, &TestFunction::delta(1, 1, vec![0], 0)).unwrap();
        assert!((q - 1.0).abs() < 1e-12);

        let k = random_finite_range_kernel(1, 2, 2, 3, true).unwrap();
        let g = grid(&k, 32);
        let d = evolve_density(&triangular_like(), &g, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let support = (0..3)
                .map(|_| (vec![rng.random_range(-5..=5)], (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let psi = TestFunction::new(2, support).unwrap();
            assert!(quadratic_form(&d, &psi).unwrap() >= -1e-10);
        }
        let far = TestFunction::delta(1, 2, vec![40], 0);
        assert!(quadratic_form(&d, &far).is_err());
    }

    fn triangular_like() -> SpectralDensity {
        white_noise_density(1.0, 0.3, 2, 1, 32).unwrap()
    }

    #[test]
    fn mixing_integral_examples() {
        let k = build_nn_kernel(1, 1, &[1.0]).unwrap();
        let g = grid(&k, 256);
        let lim = limit_density(&white_noise_density(0.0, 1.0, 1, 1, 256).unwrap(), &g).unwrap();
        let psi = TestFunction::full_delta(1, 1);
        assert_eq!(mixing_integral(&lim, &g, &TestFunction::zero(1), &psi, 5.0).unwrap(), 0.0);
        let at0 = mixing_integral(&lim, &g, &psi, &psi, 0.0).unwrap();
        let q = quadratic_form(&lim.density, &psi).unwrap();
        assert!((at0 - q).abs() < 1e-12);
    }

    #[test]
    fn convergence_csv_layout() {
        let w = white_noise_density(1.0, 1.0, 1, 1, 16).unwrap();
        let tab = covariance_from_density(&w, &[vec![0]]);
        let rows = convergence_rows(2.0, &[vec![0]], &tab, &tab);
        assert_eq!(rows.len(), 4);
        let mut out = Vec::new();
        write_convergence_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("t,z,i,j,k,l,q_t,q_inf,abs_diff\n2,0,0,0,0,0,"));
    }
}
