//! Finite-range interaction (force) kernels `V: Z^d → R^{n×n}` and the
//! structural conditions E1-E3.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::linalg::{max_abs_real, RMatrix};
use crate::report::{Condition, ConditionReport, Location, Verdict, Witness};
use crate::spectral::fourier_symbol;

/// Tolerance below zero tolerated for the least symbol eigenvalue.
pub const E3_TOLERANCE: f64 = 1e-10;
/// Safety margin added by the non-negativity shift.
pub const SHIFT_MARGIN: f64 = 1e-6;

/// Compactly supported force matrix with `V(-z) = V(z)^T` held exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionKernel {
    dim: usize,
    components: usize,
    range: usize,
    entries: BTreeMap<Vec<i32>, RMatrix>,
}

/// Offsets whose first nonzero coordinate is positive, plus the origin.
pub fn is_canonical(z: &[i32]) -> bool {
    match z.iter().find(|&&c| c != 0) {
        None => true,
        Some(&c) => c > 0,
    }
}

fn chebyshev(z: &[i32]) -> usize {
    z.iter().map(|c| c.unsigned_abs() as usize).max().unwrap_or(0)
}

fn negate(z: &[i32]) -> Vec<i32> {
    z.iter().map(|c| -c).collect()
}

/// All offsets in the box `[-range, range]^d`, lexicographic.
fn box_offsets(dim: usize, range: usize) -> Vec<Vec<i32>> {
    let r = range as i32;
    let mut out = vec![vec![]];
    for _ in 0..dim {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-r..=r).map(move |c| {
                    let mut z = prefix.clone();
                    z.push(c);
                    z
                })
            })
            .collect();
    }
    out
}

impl InteractionKernel {
    /// Build from a complete listing of offsets. Missing offsets are zero;
    /// the listing must already satisfy `V(-z) = V(z)^T` exactly.
    pub fn new(
        dim: usize,
        components: usize,
        range: usize,
        entries: impl IntoIterator<Item = (Vec<i32>, RMatrix)>,
    ) -> Result<Self> {
        if dim == 0 || components == 0 {
            return Err(Error::InvalidParameter("d and n must be positive".into()));
        }
        if range == 0 {
            return Err(Error::InvalidParameter("range N must be >= 1".into()));
        }
        let mut map = BTreeMap::new();
        for (z, m) in entries {
            if z.len() != dim {
                return Err(Error::InvalidParameter(format!("offset {z:?} is not {dim}-dimensional")));
            }
            if m.nrows() != components || m.ncols() != components {
                return Err(Error::InvalidParameter(format!(
                    "matrix at {z:?} is {}x{}, expected {components}x{components}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if chebyshev(&z) > range {
                return Err(Error::InvalidParameter(format!("offset {z:?} outside range {range}")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("non-finite entry at {z:?}")));
            }
            map.insert(z, m);
        }
        let kernel = Self { dim, components, range, entries: map };
        if let Some((offset, defect)) = kernel.worst_asymmetry() {
            if defect > 0.0 {
                return Err(Error::Asymmetric { offset, defect });
            }
        }
        Ok(kernel)
    }

    /// Build from canonical half-space offsets (and the origin); the
    /// remaining offsets are mirrored by `V(-z) = V(z)^T`.
    pub fn from_half_space(
        dim: usize,
        components: usize,
        range: usize,
        entries: impl IntoIterator<Item = (Vec<i32>, RMatrix)>,
    ) -> Result<Self> {
        let mut full = Vec::new();
        for (z, m) in entries {
            if !is_canonical(&z) {
                return Err(Error::InvalidParameter(format!("offset {z:?} is not in the canonical half-space")));
            }
            if z.iter().any(|&c| c != 0) {
                full.push((negate(&z), m.transpose()));
            }
            full.push((z, m));
        }
        Self::new(dim, components, range, full)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn range(&self) -> usize {
        self.range
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Vec<i32>, &RMatrix)> {
        self.entries.iter()
    }

    pub fn get(&self, z: &[i32]) -> Option<&RMatrix> {
        self.entries.get(z)
    }

    /// Offset with the largest `|V(-z) - V(z)^T|`, if any entry exists.
    pub fn worst_asymmetry(&self) -> Option<(Vec<i32>, f64)> {
        let zero = RMatrix::zeros(self.components, self.components);
        self.entries
            .iter()
            .map(|(z, m)| {
                let mirror = self.entries.get(&negate(z)).unwrap_or(&zero);
                (z.clone(), max_abs_real(&(mirror - m.transpose())))
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Upper bound on `‖V̂(θ)‖` (sum of Frobenius norms).
    pub fn symbol_norm_bound(&self) -> f64 {
        self.entries.values().map(|m| m.norm()).sum()
    }

    /// Upper bound on the largest dispersion frequency.
    pub fn omega_max_bound(&self) -> f64 {
        self.symbol_norm_bound().sqrt()
    }

    /// `(V∗u)(x) = Σ_z V(z) u(x-z)` on a periodic lattice, site-major layout.
    pub fn convolve(&self, lattice: &Lattice, u: &[f64]) -> Vec<f64> {
        let n = self.components;
        let mut out = vec![0.0; u.len()];
        let shifts: Vec<(Vec<isize>, &RMatrix)> = self
            .entries
            .iter()
            .map(|(z, m)| (z.iter().map(|&c| -(c as isize)).collect(), m))
            .collect();
        for x in 0..lattice.len() {
            let dst = &mut out[x * n..(x + 1) * n];
            for (neg_z, m) in &shifts {
                let y = lattice.offset(x, neg_z);
                let src = &u[y * n..(y + 1) * n];
                for k in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += m[(k, l)] * src[l];
                    }
                    dst[k] += acc;
                }
            }
        }
        out
    }

    /// Add `shift * I` to `V(0)`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut out = self.clone();
        let origin = vec![0; self.dim];
        let n = self.components;
        let entry = out.entries.entry(origin).or_insert_with(|| RMatrix::zeros(n, n));
        for k in 0..n {
            entry[(k, k)] += shift;
        }
        out
    }

    pub fn to_document(&self) -> KernelDocument {
        KernelDocument {
            d: self.dim,
            n: self.components,
            range: self.range,
            entries: self
                .entries
                .iter()
                .filter(|(z, _)| is_canonical(z))
                .map(|(z, m)| KernelEntry {
                    z: z.clone(),
                    matrix: (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect(),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: &KernelDocument) -> Result<Self> {
        let entries = doc
            .entries
            .iter()
            .map(|e| {
                let rows = e.matrix.len();
                if e.matrix.iter().any(|r| r.len() != rows) {
                    return Err(Error::InvalidParameter(format!("matrix at {:?} is not square", e.z)));
                }
                let flat: Vec<f64> = e.matrix.iter().flatten().copied().collect();
                Ok((e.z.clone(), RMatrix::from_row_slice(rows, rows, &flat)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_half_space(doc.d, doc.n, doc.range, entries)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: KernelDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// Serialized form: canonical half-space offsets only, mirror implied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelDocument {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "N")]
    pub range: usize,
    pub entries: Vec<KernelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelEntry {
    pub z: Vec<i32>,
    pub matrix: Vec<Vec<f64>>,
}

/// Block-diagonal nearest-neighbour crystal: each component is the
/// discrete Laplacian plus its own mass term.
pub fn build_nn_kernel(dim: usize, components: usize, masses: &[f64]) -> Result<InteractionKernel> {
    if dim == 0 || components == 0 {
        return Err(Error::InvalidParameter("d and n must be positive".into()));
    }
    if masses.len() != components {
        return Err(Error::InvalidParameter(format!(
            "expected {components} masses, got {}",
            masses.len()
        )));
    }
    if let Some(m) = masses.iter().find(|m| !(m.is_finite() && **m >= 0.0)) {
        return Err(Error::InvalidParameter(format!("mass {m} must be finite and nonnegative")));
    }
    let origin = RMatrix::from_fn(components, components, |i, j| {
        if i == j {
            2.0 * dim as f64 + masses[i] * masses[i]
        } else {
            0.0
        }
    });
    let hop = -RMatrix::identity(components, components);
    let mut entries = vec![(vec![0; dim], origin)];
    for axis in 0..dim {
        let mut e = vec![0; dim];
        e[axis] = 1;
        entries.push((e, hop.clone()));
    }
    InteractionKernel::from_half_space(dim, components, 1, entries)
}

/// Random element of the finite-range class `R_N`, deterministic in `seed`.
/// With `nonneg_shift`, `V(0)` is shifted so the symbol is non-negative
/// (E3) with margin [`SHIFT_MARGIN`].
pub fn random_finite_range_kernel(
    dim: usize,
    components: usize,
    range: usize,
    seed: u64,
    nonneg_shift: bool,
) -> Result<InteractionKernel> {
    if dim == 0 || components == 0 || range == 0 {
        return Err(Error::InvalidParameter("d, n and N must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = components;
    let mut entries = Vec::new();
    for z in box_offsets(dim, range).into_iter().filter(|z| is_canonical(z)) {
        let origin = z.iter().all(|&c| c == 0);
        let mut m = RMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if origin && j < i {
                    continue;
                }
                let v: f64 = StandardNormal.sample(&mut rng);
                m[(i, j)] = v;
                if origin {
                    m[(j, i)] = v;
                }
            }
        }
        entries.push((z, m));
    }
    let kernel = InteractionKernel::from_half_space(dim, components, range, entries)?;
    if !nonneg_shift {
        return Ok(kernel);
    }
    let lowest = refined_least_eigenvalue(&kernel, shift_check_resolution(dim));
    Ok(kernel.shifted(-lowest + SHIFT_MARGIN))
}

/// Per-axis resolution of the grid used by the non-negativity shift.
pub fn shift_check_resolution(dim: usize) -> usize {
    ((1024f64).powf(1.0 / dim as f64).round() as usize).max(16)
}

fn least_at(kernel: &InteractionKernel, theta: &[f64]) -> f64 {
    crate::linalg::least_eigenvalue(&fourier_symbol(kernel, theta))
}

/// Least eigenvalue of the symbol: grid scan, then golden-section
/// refinement around the lowest local minima.
pub(crate) fn refined_least_eigenvalue(kernel: &InteractionKernel, resolution: usize) -> f64 {
    let lattice = Lattice { dim: kernel.dim(), size: resolution };
    let values: Vec<f64> = (0..lattice.len()).map(|i| least_at(kernel, &lattice.theta(i))).collect();
    let mut minima: Vec<usize> = (0..lattice.len())
        .filter(|&i| {
            (0..lattice.dim).all(|a| {
                values[i] <= values[lattice.shift(i, a, 1)] && values[i] <= values[lattice.shift(i, a, -1)]
            })
        })
        .collect();
    minima.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    minima.truncate(8);
    let h = lattice.spacing();
    let mut best = values.iter().copied().fold(f64::INFINITY, f64::min);
    for start in minima {
        let mut theta = lattice.theta(start);
        for _sweep in 0..3 {
            for axis in 0..lattice.dim {
                let centre = theta[axis];
                let (lo, hi) = (centre - h, centre + h);
                let arg = golden_section(lo, hi, 40, |x| {
                    let mut t = theta.clone();
                    t[axis] = x;
                    least_at(kernel, &t)
                });
                theta[axis] = arg;
            }
        }
        best = best.min(least_at(kernel, &theta));
    }
    best
}

fn golden_section(mut lo: f64, mut hi: f64, iterations: usize, f: impl Fn(f64) -> f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iterations {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        x1
    } else {
        x2
    }
}

/// E1 and E2 from storage, E3 on a `grid_resolution^d` θ-grid.
///
/// E3 passes when the least eigenvalue is non-negative, is inconclusive in
/// `[-E3_TOLERANCE, 0)`, and fails below.
pub fn check_e123(kernel: &InteractionKernel, grid_resolution: usize) -> Result<ConditionReport> {
    if grid_resolution < 16 {
        return Err(Error::InvalidParameter(format!("grid resolution {grid_resolution} < 16")));
    }
    let e1 = ConditionReport::new(Condition::E1, Verdict::Pass)
        .witness(Witness::new(Location::Global, kernel.range() as f64).with_note("compact support radius"));

    let e2 = match kernel.worst_asymmetry() {
        Some((offset, defect)) if defect > 0.0 => ConditionReport::new(Condition::E2, Verdict::Fail)
            .witness(Witness::new(Location::Offset(offset), defect)),
        _ => ConditionReport::new(Condition::E2, Verdict::Pass),
    }
    .tolerance("symmetry", 0.0);

    let lattice = Lattice::new(kernel.dim(), grid_resolution)?;
    let (node, lowest) = (0..lattice.len())
        .map(|i| (i, least_at(kernel, &lattice.theta(i))))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty grid");
    let verdict = if lowest >= 0.0 {
        Verdict::Pass
    } else if lowest >= -E3_TOLERANCE {
        Verdict::Inconclusive
    } else {
        Verdict::Fail
    };
    let e3 = ConditionReport::new(Condition::E3, verdict)
        .witness(Witness::new(Location::Theta(lattice.theta(node)), lowest).with_note("least eigenvalue of symbol"))
        .tolerance("eigenvalue", E3_TOLERANCE)
        .tolerance("grid_resolution", grid_resolution as f64);

    Ok(ConditionReport::composite(Condition::E123, vec![e1, e2, e3]))
}
