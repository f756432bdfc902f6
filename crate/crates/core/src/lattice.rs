//! Periodic lattice `Z_L^d`, its dual θ-grid, and multidimensional FFTs in
//! the crystal's sign convention.
//!
//! The forward transform is `Ŷ(θ) = Σ_x Y(x) e^{ixθ}` and the inverse is
//! `Y(x) = L^{-d} Σ_θ e^{-ixθ} Ŷ(θ)`, with `θ = 2πk/L`. Sites and θ-nodes
//! share the same row-major index (axis 0 slowest).

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Lattice {
    pub dim: usize,
    /// Number of sites per axis.
    pub size: usize,
}

impl Lattice {
    pub fn new(dim: usize, size: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("lattice dimension must be >= 1".into()));
        }
        if size < 2 {
            return Err(Error::InvalidParameter(format!("lattice size {size} < 2")));
        }
        size.checked_pow(dim as u32)
            .ok_or_else(|| Error::InvalidParameter("lattice too large".into()))?;
        Ok(Self { dim, size })
    }

    /// Number of sites (equivalently θ-nodes).
    pub fn len(&self) -> usize {
        self.size.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.size as f64
    }

    fn stride(&self, axis: usize) -> usize {
        self.size.pow((self.dim - 1 - axis) as u32)
    }

    pub fn coords(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim];
        let mut rest = index;
        for axis in (0..self.dim).rev() {
            out[axis] = rest % self.size;
            rest /= self.size;
        }
        out
    }

    pub fn index(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.size + c)
    }

    /// Site index of an arbitrary integer offset, wrapped periodically.
    pub fn wrap(&self, offset: &[i64]) -> usize {
        let l = self.size as i64;
        offset.iter().fold(0usize, |acc, &c| acc * self.size + c.rem_euclid(l) as usize)
    }

    /// Minimal-image representative of a site, each coordinate in `(-L/2, L/2]`.
    pub fn minimal_image(&self, index: usize) -> Vec<i64> {
        let l = self.size as i64;
        self.coords(index)
            .into_iter()
            .map(|c| {
                let c = c as i64;
                if c > l / 2 {
                    c - l
                } else {
                    c
                }
            })
            .collect()
    }

    /// Euclidean length of the minimal-image vector of a site.
    pub fn torus_norm(&self, index: usize) -> f64 {
        self.minimal_image(index).iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt()
    }

    /// θ-vector of a node, components in `[0, 2π)`.
    pub fn theta(&self, index: usize) -> Vec<f64> {
        let h = self.spacing();
        self.coords(index).into_iter().map(|c| c as f64 * h).collect()
    }

    /// Node carrying `-θ`.
    pub fn conj_index(&self, index: usize) -> usize {
        let coords: Vec<usize> = self
            .coords(index)
            .into_iter()
            .map(|c| (self.size - c) % self.size)
            .collect();
        self.index(&coords)
    }

    pub fn is_self_conjugate(&self, index: usize) -> bool {
        self.conj_index(index) == index
    }

    /// Neighbour reached by `step` sites along `axis`, periodically.
    pub fn shift(&self, index: usize, axis: usize, step: isize) -> usize {
        let mut coords = self.coords(index);
        let l = self.size as isize;
        coords[axis] = (coords[axis] as isize + step).rem_euclid(l) as usize;
        self.index(&coords)
    }

    /// Node obtained by adding a full offset vector.
    pub fn offset(&self, index: usize, delta: &[isize]) -> usize {
        let l = self.size as isize;
        let coords: Vec<usize> = self
            .coords(index)
            .into_iter()
            .zip(delta)
            .map(|(c, &d)| (c as isize + d).rem_euclid(l) as usize)
            .collect();
        self.index(&coords)
    }

    /// Representatives of the `θ ↔ -θ` pairing: every node whose index does
    /// not exceed that of its conjugate.
    pub fn conjugate_representatives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| i <= self.conj_index(i)).collect()
    }

    /// Sub-lattice keeping every `factor`-th node along each axis.
    pub fn coarsen(&self, factor: usize) -> Option<(Lattice, Vec<usize>)> {
        if factor == 0 || self.size % factor != 0 || self.size / factor < 2 {
            return None;
        }
        let coarse = Lattice { dim: self.dim, size: self.size / factor };
        let map = (0..coarse.len())
            .map(|i| {
                let c: Vec<usize> = coarse.coords(i).into_iter().map(|c| c * factor).collect();
                self.index(&c)
            })
            .collect();
        Some((coarse, map))
    }
}

impl fmt::Display for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Z_{}^{}", self.size, self.dim)
    }
}

/// Multidimensional FFT on row-major buffers of a [`Lattice`].
#[derive(Clone)]
pub struct LatticeFft {
    lattice: Lattice,
    // rustfft "inverse" computes Σ e^{+2πikn/L}, which is the crystal's forward map.
    to_fourier: Arc<dyn Fft<f64>>,
    to_real: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for LatticeFft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatticeFft").field("lattice", &self.lattice).finish()
    }
}

impl LatticeFft {
    pub fn new(lattice: Lattice) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            lattice,
            to_fourier: planner.plan_fft_inverse(lattice.size),
            to_real: planner.plan_fft_forward(lattice.size),
        }
    }

    pub fn lattice(&self) -> Lattice {
        self.lattice
    }

    /// `Ŷ(θ) = Σ_x Y(x) e^{ixθ}`, in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.apply(&*self.to_fourier, buf);
    }

    /// `Y(x) = L^{-d} Σ_θ e^{-ixθ} Ŷ(θ)`, in place.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.apply(&*self.to_real, buf);
        let scale = 1.0 / self.lattice.len() as f64;
        buf.iter_mut().for_each(|z| *z *= scale);
    }

    fn apply(&self, fft: &dyn Fft<f64>, buf: &mut [Complex64]) {
        let lat = self.lattice;
        assert_eq!(buf.len(), lat.len(), "buffer does not match lattice");
        let l = lat.size;
        let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        // Last axis is contiguous.
        fft.process_with_scratch(buf, &mut scratch);
        let mut line = vec![Complex64::new(0.0, 0.0); l];
        for axis in 0..lat.dim.saturating_sub(1) {
            let stride = lat.stride(axis);
            let block = stride * l;
            for base_block in (0..buf.len()).step_by(block) {
                for offset in 0..stride {
                    let start = base_block + offset;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = buf[start + j * stride];
                    }
                    fft.process_with_scratch(&mut line, &mut scratch);
                    for (j, value) in line.iter().enumerate() {
                        buf[start + j * stride] = *value;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(lat: &Lattice, data: &[Complex64]) -> Vec<Complex64> {
        (0..lat.len())
            .map(|k| {
                let th = lat.theta(k);
                (0..lat.len())
                    .map(|x| {
                        let xc = lat.coords(x);
                        let phase: f64 = xc.iter().zip(&th).map(|(&a, &b)| a as f64 * b).sum();
                        data[x] * Complex64::from_polar(1.0, phase)
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn fft_matches_direct_sum_in_two_dimensions() {
        let lat = Lattice::new(2, 6).unwrap();
        let data: Vec<Complex64> = (0..lat.len())
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut buf = data.clone();
        let fft = LatticeFft::new(lat);
        fft.forward(&mut buf);
        let direct = naive_forward(&lat, &data);
        for (a, b) in buf.iter().zip(&direct) {
            assert!((a - b).norm() < 1e-12);
        }
        fft.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&data) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn conjugation_and_minimal_image() {
        let lat = Lattice::new(2, 8).unwrap();
        let i = lat.index(&[3, 0]);
        assert_eq!(lat.coords(lat.conj_index(i)), vec![5, 0]);
        assert!(lat.is_self_conjugate(lat.index(&[4, 0])));
        assert_eq!(lat.minimal_image(lat.index(&[7, 4])), vec![-1, 4]);
        assert_eq!(lat.wrap(&[-1, 9]), lat.index(&[7, 1]));
        let reps = lat.conjugate_representatives();
        // 4 self-conjugate nodes plus half of the remaining 60
        assert_eq!(reps.len(), 4 + 30);
    }

    #[test]
    fn coarsen_keeps_every_other_node() {
        let lat = Lattice::new(1, 16).unwrap();
        let (coarse, map) = lat.coarsen(2).unwrap();
        assert_eq!(coarse.size, 8);
        assert_eq!(map[3], 6);
        assert!(lat.coarsen(3).is_none());
    }
}
