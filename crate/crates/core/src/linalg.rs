//! Small dense helpers over `nalgebra` for n×n Hermitian blocks.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type RMatrix = DMatrix<f64>;

pub const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };
pub const ONE: Complex64 = Complex64 { re: 1.0, im: 0.0 };

pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Replace `m` by `(m + m*)/2`.
pub fn hermitize(m: &mut CMatrix) {
    let adj = m.adjoint();
    *m += adj;
    *m *= c(0.5);
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn max_abs_real(m: &RMatrix) -> f64 {
    m.iter().map(|z| z.abs()).fold(0.0, f64::max)
}

pub fn to_complex(m: &RMatrix) -> CMatrix {
    m.map(c)
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending and
/// eigenvector columns reordered to match.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    if n == 1 {
        return (vec![m[(0, 0)].re], CMatrix::from_element(1, 1, ONE));
    }
    // Real input (self-conjugate θ) keeps real eigenvectors.
    if m.iter().all(|z| z.im == 0.0) {
        let (values, vectors) = symmetric_eigen(&m.map(|z| z.re));
        return (values, to_complex(&vectors));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Real symmetric eigen-decomposition, ascending.
pub fn symmetric_eigen(m: &RMatrix) -> (Vec<f64>, RMatrix) {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = RMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// `B diag(f) B*`.
pub fn spectral_function(basis: &CMatrix, values: &[f64]) -> CMatrix {
    let n = basis.nrows();
    let mut scaled = basis.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    let mut out = &scaled * basis.adjoint();
    if n > 1 {
        hermitize(&mut out);
    }
    out
}

/// A factor `S` with `S S* = m` for a Hermitian PSD matrix. Eigenvalues
/// above `-tol` are clamped to zero; otherwise the least eigenvalue is
/// returned as the error.
pub fn psd_factor(m: &CMatrix, tol: f64) -> std::result::Result<CMatrix, f64> {
    let (values, vectors) = hermitian_eigen(m);
    if values[0] < -tol {
        return Err(values[0]);
    }
    let mut out = vectors;
    for (j, &v) in values.iter().enumerate() {
        out.column_mut(j).scale_mut(v.max(0.0).sqrt());
    }
    Ok(out)
}

pub fn least_eigenvalue(m: &CMatrix) -> f64 {
    hermitian_eigen(m).0[0]
}

/// Assemble a 2×2 block matrix from n×n blocks.
pub fn block2(b00: &CMatrix, b01: &CMatrix, b10: &CMatrix, b11: &CMatrix) -> CMatrix {
    let n = b00.nrows();
    let mut out = CMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(b00);
    out.view_mut((0, n), (n, n)).copy_from(b01);
    out.view_mut((n, 0), (n, n)).copy_from(b10);
    out.view_mut((n, n), (n, n)).copy_from(b11);
    out
}

/// Extract block `(i, j)` of a 2n×2n matrix.
pub fn block(m: &CMatrix, i: usize, j: usize) -> CMatrix {
    let n = m.nrows() / 2;
    m.view((i * n, j * n), (n, n)).into_owned()
}
