//! Exact spectral propagation on the periodic lattice, Green's functions,
//! the truncated Green's function and the energy functional.

use std::collections::VecDeque;
use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::InteractionKernel;
use crate::lattice::{Lattice, LatticeFft};
use crate::linalg::{block2, spectral_function, CMatrix, RMatrix, ZERO};
use crate::spectral::{critical_set_scan, spectral_points, CriticalSetEstimate, DispersionGrid, SpectralPoint, Thresholds};

/// Tolerated imaginary part after returning to real space.
pub const IMAGINARY_LIMIT: f64 = 1e-6;

/// Displacement `u` and velocity `v`, `n` components per site, site-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub lattice: Lattice,
    pub components: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub time: f64,
}

impl FieldState {
    pub fn zeros(lattice: Lattice, components: usize) -> Self {
        let len = lattice.len() * components;
        Self { lattice, components, u: vec![0.0; len], v: vec![0.0; len], time: 0.0 }
    }

    pub fn new(lattice: Lattice, components: usize, u: Vec<f64>, v: Vec<f64>, time: f64) -> Result<Self> {
        let len = lattice.len() * components;
        if u.len() != len || v.len() != len {
            return Err(Error::LatticeMismatch(format!(
                "fields of length {}/{} on {lattice} with n={components}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite field value".into()));
        }
        Ok(Self { lattice, components, u, v, time })
    }

    /// Unit displacement in component `component` at `site`.
    pub fn delta(lattice: Lattice, components: usize, site: usize, component: usize) -> Self {
        let mut s = Self::zeros(lattice, components);
        s.u[site * components + component] = 1.0;
        s
    }

    /// Component `c` of `Y = (u, v)`, `c < 2n`, at `site`.
    pub fn get(&self, site: usize, c: usize) -> f64 {
        let n = self.components;
        if c < n {
            self.u[site * n + c]
        } else {
            self.v[site * n + c - n]
        }
    }

    /// `a·self + b·other`, keeping this time stamp.
    pub fn combine(&self, a: f64, other: &FieldState, b: f64) -> FieldState {
        let mix = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| a * p + b * q).collect();
        FieldState { u: mix(&self.u, &other.u), v: mix(&self.v, &other.v), ..self.clone() }
    }

    pub fn max_abs_diff(&self, other: &FieldState) -> f64 {
        self.u
            .iter()
            .zip(&other.u)
            .chain(self.v.iter().zip(&other.v))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).map(|x| x.abs()).fold(0.0, f64::max)
    }

    /// Fourier coefficients per component: `out[c][node]`, `c < 2n`.
    pub fn to_fourier(&self, fft: &LatticeFft) -> Vec<Vec<Complex64>> {
        let n = self.components;
        let sites = self.lattice.len();
        (0..2 * n)
            .map(|c| {
                let mut buf: Vec<Complex64> = (0..sites).map(|x| Complex64::new(self.get(x, c), 0.0)).collect();
                fft.forward(&mut buf);
                buf
            })
            .collect()
    }

    /// Inverse of [`FieldState::to_fourier`]; fails when the result is not real.
    pub fn from_fourier(mut data: Vec<Vec<Complex64>>, fft: &LatticeFft, time: f64) -> Result<Self> {
        let lattice = fft.lattice();
        let n = data.len() / 2;
        let mut state = Self::zeros(lattice, n);
        state.time = time;
        let mut residue: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (c, buf) in data.iter_mut().enumerate() {
            fft.inverse(buf);
            for (x, z) in buf.iter().enumerate() {
                residue = residue.max(z.im.abs());
                scale = scale.max(z.re.abs());
                if c < n {
                    state.u[x * n + c] = z.re;
                } else {
                    state.v[x * n + c - n] = z.re;
                }
            }
        }
        let limit = IMAGINARY_LIMIT * (1.0 + scale);
        if residue > limit {
            return Err(Error::ImaginaryResidue { residue, limit });
        }
        Ok(state)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `Ĝ(t,θ) = [[cos Ωt, Ω⁻¹ sin Ωt], [-Ω sin Ωt, cos Ωt]]` in the eigenbasis,
/// with `Ω⁻¹ sin Ωt = t·sinc(Ωt)`; exactly the identity at `t = 0`.
pub fn propagator_block(point: &SpectralPoint, t: f64) -> CMatrix {
    let n = point.components();
    if t == 0.0 {
        return CMatrix::identity(2 * n, 2 * n);
    }
    let cos: Vec<f64> = point.omega.iter().map(|w| (w * t).cos()).collect();
    let sin_over: Vec<f64> = point.omega.iter().map(|w| t * sinc(w * t)).collect();
    let minus_w_sin: Vec<f64> = point.omega.iter().map(|w| -w * (w * t).sin()).collect();
    if n == 1 {
        let c = |v: f64| Complex64::new(v, 0.0);
        return CMatrix::from_row_slice(2, 2, &[c(cos[0]), c(sin_over[0]), c(minus_w_sin[0]), c(cos[0])]);
    }
    let cb = spectral_function(&point.basis, &cos);
    block2(
        &cb,
        &spectral_function(&point.basis, &sin_over),
        &spectral_function(&point.basis, &minus_w_sin),
        &cb,
    )
}

/// Per-node propagator blocks `Ĝ(t,θ)` on a lattice.
#[derive(Clone, Debug)]
pub struct PropagatorBlocks {
    pub lattice: Lattice,
    pub time: f64,
    pub blocks: Vec<CMatrix>,
}

impl PropagatorBlocks {
    pub fn new(lattice: Lattice, points: &[SpectralPoint], t: f64) -> Self {
        let blocks = points.par_iter().map(|p| propagator_block(p, t)).collect();
        Self { lattice, time: t, blocks }
    }

    /// Multiply each node's Fourier vector by `Ĝ`.
    pub fn apply_fourier(&self, data: &mut [Vec<Complex64>]) {
        let m = data.len();
        let mut buf = vec![ZERO; m];
        for (node, g) in self.blocks.iter().enumerate() {
            for (c, slot) in buf.iter_mut().enumerate() {
                *slot = ZERO;
                for (k, comp) in data.iter().enumerate() {
                    *slot += g[(c, k)] * comp[node];
                }
            }
            for (c, comp) in data.iter_mut().enumerate() {
                comp[node] = buf[c];
            }
        }
    }
}

/// Spectral data of a kernel on one lattice, reused across times and states.
#[derive(Clone, Debug)]
pub struct Propagator {
    lattice: Lattice,
    components: usize,
    points: Vec<SpectralPoint>,
    fft: LatticeFft,
}

impl Propagator {
    pub fn new(kernel: &InteractionKernel, lattice: Lattice) -> Result<Self> {
        let points = spectral_points(kernel, lattice, Thresholds::default().delta_cross)?;
        Ok(Self { lattice, components: kernel.components(), points, fft: LatticeFft::new(lattice) })
    }

    pub fn from_grid(grid: &DispersionGrid) -> Self {
        Self {
            lattice: grid.lattice(),
            components: grid.components(),
            points: grid.points().to_vec(),
            fft: LatticeFft::new(grid.lattice()),
        }
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    pub fn fft(&self) -> &LatticeFft {
        &self.fft
    }

    pub fn points(&self) -> &[SpectralPoint] {
        &self.points
    }

    pub fn blocks(&self, t: f64) -> PropagatorBlocks {
        PropagatorBlocks::new(self.lattice, &self.points, t)
    }

    fn check(&self, state: &FieldState) -> Result<()> {
        if state.lattice != self.lattice || state.components != self.components {
            return Err(Error::LatticeMismatch(format!(
                "state on {} with n={}, propagator on {} with n={}",
                state.lattice, state.components, self.lattice, self.components
            )));
        }
        Ok(())
    }

    pub fn evolve(&self, state: &FieldState, t: f64) -> Result<FieldState> {
        self.evolve_with(state, &self.blocks(t))
    }

    /// Evolve with precomputed blocks, advancing the time stamp by `blocks.time`.
    pub fn evolve_with(&self, state: &FieldState, blocks: &PropagatorBlocks) -> Result<FieldState> {
        self.check(state)?;
        let mut data = state.to_fourier(&self.fft);
        blocks.apply_fourier(&mut data);
        FieldState::from_fourier(data, &self.fft, state.time + blocks.time)
    }
}

/// `Y(t)` from `Y(0)` by FFT, per-node multiplication and inverse FFT.
pub fn evolve(state: &FieldState, kernel: &InteractionKernel, t: f64) -> Result<FieldState> {
    Propagator::new(kernel, state.lattice)?.evolve(state, t)
}

/// Classical RK4 integration of `ü = -V∗u` in real space.
pub fn reference_evolve_ode(state: &FieldState, kernel: &InteractionKernel, t: f64, dt: f64) -> Result<FieldState> {
    let limit = 0.1 / kernel.omega_max_bound();
    if !(dt > 0.0) || dt > limit {
        return Err(Error::StepTooLarge { dt, limit });
    }
    if state.components != kernel.components() || state.lattice.dim != kernel.dim() {
        return Err(Error::LatticeMismatch("state does not match kernel".into()));
    }
    let steps = (t.abs() / dt).ceil() as usize;
    if steps == 0 {
        return Ok(state.clone());
    }
    let h = t / steps as f64;
    let lat = state.lattice;
    let accel = |u: &[f64]| -> Vec<f64> { kernel.convolve(&lat, u).into_iter().map(|x| -x).collect() };
    let axpy = |x: &[f64], a: f64, y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p + a * q).collect() };
    let (mut u, mut v) = (state.u.clone(), state.v.clone());
    for _ in 0..steps {
        let k1u = v.clone();
        let k1v = accel(&u);
        let u2 = axpy(&u, h / 2.0, &k1u);
        let v2 = axpy(&v, h / 2.0, &k1v);
        let k2u = v2.clone();
        let k2v = accel(&u2);
        let u3 = axpy(&u, h / 2.0, &k2u);
        let v3 = axpy(&v, h / 2.0, &k2v);
        let k3u = v3.clone();
        let k3v = accel(&u3);
        let u4 = axpy(&u, h, &k3u);
        let v4 = axpy(&v, h, &k3v);
        let k4u = v4;
        let k4v = accel(&u4);
        for i in 0..u.len() {
            u[i] += h / 6.0 * (k1u[i] + 2.0 * k2u[i] + 2.0 * k3u[i] + k4u[i]);
            v[i] += h / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        }
    }
    FieldState::new(lat, state.components, u, v, state.time + t)
}

/// `H = ½Σ|v|² + ½Σ(V∗u, u)`.
pub fn hamiltonian(state: &FieldState, kernel: &InteractionKernel) -> f64 {
    let vu = kernel.convolve(&state.lattice, &state.u);
    let potential: f64 = vu.iter().zip(&state.u).map(|(a, b)| a * b).sum();
    let kinetic: f64 = state.v.iter().map(|x| x * x).sum();
    0.5 * (kinetic + potential)
}

/// Real-space Green's function `G(t, z)`, one 2n×2n block per site.
#[derive(Clone, Debug)]
pub struct GreenFunction {
    pub lattice: Lattice,
    pub components: usize,
    pub time: f64,
    pub blocks: Vec<RMatrix>,
    /// Largest discarded imaginary part.
    pub imaginary_residue: f64,
}

impl GreenFunction {
    /// Inverse FFT of `weight(node)·Ĝ(t,θ)` entrywise.
    fn from_fourier(lattice: Lattice, blocks: &PropagatorBlocks, weight: Option<&[f64]>) -> Result<Self> {
        let fft = LatticeFft::new(lattice);
        let m = blocks.blocks[0].nrows();
        let mut out = vec![RMatrix::zeros(m, m); lattice.len()];
        let mut residue: f64 = 0.0;
        for r in 0..m {
            for c in 0..m {
                let mut buf: Vec<Complex64> = blocks
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g[(r, c)] * weight.map_or(1.0, |w| w[i]))
                    .collect();
                fft.inverse(&mut buf);
                for (x, z) in buf.iter().enumerate() {
                    residue = residue.max(z.im.abs());
                    out[x][(r, c)] = z.re;
                }
            }
        }
        if residue > IMAGINARY_LIMIT {
            return Err(Error::ImaginaryResidue { residue, limit: IMAGINARY_LIMIT });
        }
        Ok(Self { lattice, components: m / 2, time: blocks.time, blocks: out, imaginary_residue: residue })
    }

    pub fn at(&self, offset: &[i64]) -> &RMatrix {
        &self.blocks[self.lattice.wrap(offset)]
    }

    /// `sup ‖G(t,x)‖_F` over sites with minimal-image length at least `radius`.
    pub fn sup_beyond(&self, radius: f64) -> f64 {
        (0..self.lattice.len())
            .filter(|&x| self.lattice.torus_norm(x) >= radius)
            .map(|x| self.blocks[x].norm())
            .fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_beyond(0.0)
    }

    /// CSV with columns `t,x_1..x_d,row,col,value`; sites at minimal image
    /// length above `radius` are skipped when a radius is given.
    pub fn write_csv(&self, out: &mut impl Write, radius: Option<f64>) -> Result<()> {
        let d = self.lattice.dim;
        let header: Vec<String> = (1..=d).map(|i| format!("x_{i}")).collect();
        writeln!(out, "t,{},row,col,value", header.join(","))?;
        for x in 0..self.lattice.len() {
            if radius.is_some_and(|r| self.lattice.torus_norm(x) > r) {
                continue;
            }
            let coords: Vec<String> = self.lattice.minimal_image(x).iter().map(|c| c.to_string()).collect();
            let b = &self.blocks[x];
            for r in 0..b.nrows() {
                for c in 0..b.ncols() {
                    writeln!(out, "{},{},{r},{c},{:.15e}", self.time, coords.join(","), b[(r, c)])?;
                }
            }
        }
        Ok(())
    }
}

fn check_window(grid: &DispersionGrid, t: f64) -> Result<f64> {
    let v_max = grid.max_group_velocity();
    let half = grid.lattice().size as f64 / 2.0;
    let reach = v_max * t.abs();
    if reach >= half {
        return Err(Error::Wraparound { v_max, reach, half });
    }
    Ok(v_max)
}

/// `G(t,·)` on `Z_L^d`; rejects times whose light cone wraps around.
pub fn green_function(kernel: &InteractionKernel, t: f64, size: usize) -> Result<GreenFunction> {
    let grid = DispersionGrid::new(kernel, size, Thresholds::default())?;
    green_function_on(&grid, t)
}

pub fn green_function_on(grid: &DispersionGrid, t: f64) -> Result<GreenFunction> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("t = {t} must be nonnegative")));
    }
    check_window(grid, t)?;
    let blocks = PropagatorBlocks::new(grid.lattice(), grid.points(), t);
    GreenFunction::from_fourier(grid.lattice(), &blocks, None)
}

/// Smooth step: 0 on `u ≤ 1/2`, 1 on `u ≥ 1`, infinitely differentiable.
pub fn ramp(u: f64) -> f64 {
    let psi = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    let a = psi(u - 0.5);
    let b = psi(1.0 - u);
    if a + b == 0.0 {
        return if u >= 1.0 { 1.0 } else { 0.0 };
    }
    a / (a + b)
}

/// Chebyshev grid distance (in angle units) from each node to the flagged set.
pub fn distance_to_flagged(scan: &CriticalSetEstimate) -> Vec<f64> {
    let lat = scan.lattice;
    let mut dist = vec![usize::MAX; lat.len()];
    let mut queue = VecDeque::new();
    for i in scan.flagged_nodes() {
        dist[i] = 0;
        queue.push_back(i);
    }
    if queue.is_empty() {
        return vec![f64::INFINITY; lat.len()];
    }
    let moves: Vec<Vec<isize>> = (0..3usize.pow(lat.dim as u32))
        .map(|mut code| {
            (0..lat.dim)
                .map(|_| {
                    let s = (code % 3) as isize - 1;
                    code /= 3;
                    s
                })
                .collect()
        })
        .filter(|m: &Vec<isize>| m.iter().any(|&s| s != 0))
        .collect();
    while let Some(a) = queue.pop_front() {
        for m in &moves {
            let b = lat.offset(a, m);
            if dist[b] == usize::MAX {
                dist[b] = dist[a] + 1;
                queue.push_back(b);
            }
        }
    }
    let h = lat.spacing();
    dist.into_iter().map(|k| k as f64 * h).collect()
}

/// `g(θ) = s(dist(θ, C)/ε)`.
pub fn cutoff_weights(scan: &CriticalSetEstimate, eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("cutoff width {eps} must be positive")));
    }
    let w: Vec<f64> = distance_to_flagged(scan).into_iter().map(|d| ramp(d / eps)).collect();
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::EmptyCutoff(eps));
    }
    Ok(w)
}

/// Green's function with its Fourier transform cut away from the flagged
/// critical set by [`cutoff_weights`].
pub fn truncated_green(kernel: &InteractionKernel, t: f64, size: usize, eps: f64) -> Result<GreenFunction> {
    let grid = DispersionGrid::new(kernel, size, Thresholds::default())?;
    let scan = critical_set_scan(&grid, &grid.thresholds());
    truncated_green_on(&grid, &scan, t, eps)
}

pub fn truncated_green_on(
    grid: &DispersionGrid,
    scan: &CriticalSetEstimate,
    t: f64,
    eps: f64,
) -> Result<GreenFunction> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("t = {t} must be nonnegative")));
    }
    check_window(grid, t)?;
    let weights = cutoff_weights(scan, eps)?;
    let blocks = PropagatorBlocks::new(grid.lattice(), grid.points(), t);
    GreenFunction::from_fourier(grid.lattice(), &blocks, Some(&weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_nn_kernel, random_finite_range_kernel};
    use crate::linalg::{c, max_abs};
    use crate::spectral::SpectralPoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nn1(m: f64) -> InteractionKernel {
        build_nn_kernel(1, 1, &[m]).unwrap()
    }

    fn random_state(lat: Lattice, n: usize, seed: u64) -> FieldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = lat.len() * n;
        let u = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        FieldState::new(lat, n, u, v, 0.0).unwrap()
    }

    fn scalar_point(lambda: f64) -> SpectralPoint {
        SpectralPoint::from_symbol(vec![0.0], CMatrix::from_element(1, 1, c(lambda)), 1e-6).unwrap()
    }

    #[test]
    fn block_examples() {
        let p = spectral_point_grid_two();
        for node in &p {
            assert_eq!(propagator_block(node, 0.0), CMatrix::identity(4, 4));
        }
        let m: f64 = 1.7;
        let t = 2.3;
        let g = propagator_block(&scalar_point(m * m), t);
        let want = [(m * t).cos(), (m * t).sin() / m, -m * (m * t).sin(), (m * t).cos()];
        for (k, w) in want.iter().enumerate() {
            assert!((g[(k / 2, k % 2)] - c(*w)).norm() < 1e-14);
        }
        let g = propagator_block(&scalar_point(0.0), 3.5);
        assert_eq!(g, CMatrix::from_row_slice(2, 2, &[c(1.0), c(3.5), c(0.0), c(1.0)]));
    }

    fn spectral_point_grid_two() -> Vec<SpectralPoint> {
        let k = random_finite_range_kernel(1, 2, 2, 1, true).unwrap();
        let lat = Lattice::new(1, 8).unwrap();
        spectral_points(&k, lat, 1e-6).unwrap()
    }

    #[test]
    fn block_group_law() {
        for p in spectral_point_grid_two() {
            let (s, t) = (0.7, 2.9);
            let lhs = propagator_block(&p, s + t);
            let rhs = propagator_block(&p, t) * propagator_block(&p, s);
            assert!(max_abs(&(lhs - rhs)) < 1e-8);
        }
    }

    #[test]
    fn evolve_identity_and_group_law() {
        let lat = Lattice::new(1, 32).unwrap();
        let k = random_finite_range_kernel(1, 2, 2, 4, true).unwrap();
        let y = random_state(lat, 2, 3);
        let prop = Propagator::new(&k, lat).unwrap();
        assert!(prop.evolve(&y, 0.0).unwrap().max_abs_diff(&y) < 1e-12);
        let a = prop.evolve(&prop.evolve(&y, 1.3).unwrap(), 2.1).unwrap();
        let b = prop.evolve(&y, 3.4).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-8 * (1.0 + b.max_abs()));
        assert!((a.time - 3.4).abs() < 1e-15);
        let back = prop.evolve(&b, -3.4).unwrap();
        assert!(back.max_abs_diff(&y) < 1e-8);
    }

    #[test]
    fn evolve_matches_rk4_for_delta() {
        let lat = Lattice::new(1, 32).unwrap();
        let k = nn1(1.0);
        let y = FieldState::delta(lat, 1, 0, 0);
        let spectral = evolve(&y, &k, 5.0).unwrap();
        let ode = reference_evolve_ode(&y, &k, 5.0, 0.01).unwrap();
        assert!(spectral.max_abs_diff(&ode) < 1e-6);
    }

    #[test]
    fn rk4_contract() {
        let lat = Lattice::new(1, 16).unwrap();
        let k = nn1(1.0);
        let y1 = random_state(lat, 1, 1);
        let y2 = random_state(lat, 1, 2);
        assert_eq!(reference_evolve_ode(&y1, &k, 0.0, 0.01).unwrap(), y1);
        let (a, b) = (0.3, -1.7);
        let lhs = reference_evolve_ode(&y1.combine(a, &y2, b), &k, 1.0, 0.01).unwrap();
        let rhs = reference_evolve_ode(&y1, &k, 1.0, 0.01)
            .unwrap()
            .combine(a, &reference_evolve_ode(&y2, &k, 1.0, 0.01).unwrap(), b);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        assert!(matches!(reference_evolve_ode(&y1, &k, 1.0, 0.5), Err(Error::StepTooLarge { .. })));
    }

    #[test]
    fn hamiltonian_examples() {
        let lat = Lattice::new(1, 16).unwrap();
        let k = nn1(1.0);
        assert_eq!(hamiltonian(&FieldState::zeros(lat, 1), &k), 0.0);
        assert_eq!(hamiltonian(&FieldState::delta(lat, 1, 3, 0), &k), 1.5);
        let y = random_state(lat, 1, 9);
        let h0 = hamiltonian(&y, &k);
        let prop = Propagator::new(&k, lat).unwrap();
        for t in [1.0, 10.0, 100.0] {
            let h = hamiltonian(&prop.evolve(&y, t).unwrap(), &k);
            assert!((h - h0).abs() <= 1e-8 * (1.0 + h0));
        }
    }

    #[test]
    fn green_at_zero_is_identity() {
        let k = build_nn_kernel(1, 2, &[1.0, 2.0]).unwrap();
        let g = green_function(&k, 0.0, 32).unwrap();
        assert!((g.at(&[0]) - RMatrix::identity(4, 4)).abs().max() < 1e-15);
        assert!(g.sup_beyond(0.5) < 1e-15);
    }

    #[test]
    fn green_is_real_and_matches_rk4_columns() {
        let k = nn1(0.0);
        let g = green_function(&k, 10.0, 256).unwrap();
        assert!(g.imaginary_residue < 1e-9);
        let lat = Lattice::new(1, 256).unwrap();
        let ode = reference_evolve_ode(&FieldState::delta(lat, 1, 0, 0), &k, 10.0, 0.01).unwrap();
        for x in 0..256 {
            assert!((g.blocks[x][(0, 0)] - ode.u[x]).abs() < 1e-5);
        }
    }

    #[test]
    fn green_rejects_wraparound() {
        let err = green_function(&nn1(1.0), 100.0, 64).unwrap_err();
        match err {
            Error::Wraparound { v_max, .. } => assert!((v_max - 0.618).abs() < 0.01),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn truncated_equals_full_without_flags() {
        // empty flag set, so g ≡ 1
        let k = nn1(1.0);
        let grid = DispersionGrid::new(&k, 64, Thresholds::default()).unwrap();
        let mut scan = critical_set_scan(&grid, &grid.thresholds());
        for cell in &mut scan.cells {
            cell.c0 = false;
            cell.crossing = false;
            cell.hess_branches.clear();
        }
        let full = green_function_on(&grid, 5.0).unwrap();
        let cut = truncated_green_on(&grid, &scan, 5.0, 1e-9).unwrap();
        for (a, b) in full.blocks.iter().zip(&cut.blocks) {
            assert!((a - b).abs().max() < 1e-10);
        }
    }

    #[test]
    fn cutoff_too_wide_is_empty() {
        let k = nn1(1.0);
        let grid = DispersionGrid::new(&k, 64, Thresholds::default()).unwrap();
        let scan = critical_set_scan(&grid, &grid.thresholds());
        assert!(matches!(truncated_green_on(&grid, &scan, 1.0, 50.0), Err(Error::EmptyCutoff(_))));
    }

    #[test]
    fn ramp_shape() {
        assert_eq!(ramp(0.2), 0.0);
        assert_eq!(ramp(0.5), 0.0);
        assert_eq!(ramp(1.0), 1.0);
        assert_eq!(ramp(3.0), 1.0);
        assert!((ramp(0.75) - 0.5).abs() < 1e-15);
        assert!(ramp(0.6) < ramp(0.7));
    }

    #[test]
    fn delta_mass_stays_inside_cone() {
        let k = nn1(1.0);
        let lat = Lattice::new(1, 512).unwrap();
        let t = 60.0;
        let y = evolve(&FieldState::delta(lat, 1, 0, 0), &k, t).unwrap();
        let v_max = DispersionGrid::new(&k, 512, Thresholds::default()).unwrap().max_group_velocity();
        let radius = (v_max + 0.5) * t;
        let mass = |x: usize| y.u[x].powi(2) + y.v[x].powi(2);
        let total: f64 = (0..lat.len()).map(mass).sum();
        let outside: f64 = (0..lat.len()).filter(|&x| lat.torus_norm(x) > radius).map(mass).sum();
        assert!(outside < 1e-6 * total, "outside fraction {}", outside / total);
    }
}
