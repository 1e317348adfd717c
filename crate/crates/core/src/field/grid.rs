use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{Error, Point};

/// Uniform periodic lattice on `[-L, L)^dim` with `n` nodes per axis.
///
/// Nodes sit at `q_j = -L + j·Δx`; the dual lattice holds the discrete
/// Fourier frequencies `k_m = m·π/L` with signed `m` in `(-n/2, n/2]`, stored
/// in the usual FFT order (non-negative frequencies first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    half_extent: f64,
    points: usize,
}

impl Grid {
    pub fn new(dim: usize, half_extent: f64, points: usize) -> Result<Self, Error> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in 1..=3")));
        }
        if !(half_extent.is_finite() && half_extent > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "half extent must be positive, got {half_extent}"
            )));
        }
        if points < 16 || !points.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be even and >= 16, got {points}"
            )));
        }
        Ok(Self {
            dim,
            half_extent,
            points,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    /// Nodes per axis.
    pub fn points(&self) -> usize {
        self.points
    }

    /// Total number of nodes, `n^dim`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_extent / self.points as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Dual-lattice spacing `π/L`.
    pub fn k_spacing(&self) -> f64 {
        PI / self.half_extent
    }

    pub fn k_cell_volume(&self) -> f64 {
        self.k_spacing().powi(self.dim as i32)
    }

    /// Largest representable wavenumber per axis, `π/Δx`.
    pub fn k_max(&self) -> f64 {
        PI / self.spacing()
    }

    /// Coordinate of node `j` along any axis.
    pub fn node(&self, j: usize) -> f64 {
        -self.half_extent + j as f64 * self.spacing()
    }

    /// Signed frequency index for FFT slot `m`, in `(-n/2, n/2]`.
    pub fn signed_mode(&self, m: usize) -> i64 {
        let n = self.points as i64;
        let m = m as i64;
        if m <= n / 2 {
            m
        } else {
            m - n
        }
    }

    /// Wavenumber stored in FFT slot `m`.
    pub fn wavenumber(&self, m: usize) -> f64 {
        self.signed_mode(m) as f64 * self.k_spacing()
    }

    pub fn axis_nodes(&self) -> Vec<f64> {
        (0..self.points).map(|j| self.node(j)).collect()
    }

    pub fn axis_wavenumbers(&self) -> Vec<f64> {
        (0..self.points).map(|m| self.wavenumber(m)).collect()
    }

    /// Per-axis indices of flat (row-major, last axis fastest) index `idx`.
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let n = self.points;
        let mut out = [0; 3];
        let mut rest = idx;
        for axis in (0..self.dim).rev() {
            out[axis] = rest % n;
            rest /= n;
        }
        out
    }

    pub fn ravel(&self, index: [usize; 3]) -> usize {
        index[..self.dim].iter().fold(0, |acc, &i| acc * self.points + i)
    }

    pub fn position(&self, idx: usize) -> Point {
        let ix = self.unravel(idx);
        let mut p = [0.0; 3];
        for axis in 0..self.dim {
            p[axis] = self.node(ix[axis]);
        }
        p
    }

    pub fn wavevector(&self, idx: usize) -> Point {
        let ix = self.unravel(idx);
        let mut k = [0.0; 3];
        for axis in 0..self.dim {
            k[axis] = self.wavenumber(ix[axis]);
        }
        k
    }

    /// `|k|^2` for every slot of the dual lattice, in FFT order.
    pub fn k_squared(&self) -> Vec<f64> {
        (0..self.len())
            .map(|idx| {
                let k = self.wavevector(idx);
                k.iter().map(|x| x * x).sum()
            })
            .collect()
    }

    /// Whether node `idx` lies in the outer shell where some coordinate has
    /// `|q_i| > (1 - fraction)·L`.
    pub fn in_outer_shell(&self, idx: usize, fraction: f64) -> bool {
        let limit = (1.0 - fraction) * self.half_extent;
        let p = self.position(idx);
        p[..self.dim].iter().any(|x| x.abs() > limit)
    }

    /// Lattice of cells centred on the position nodes.
    pub fn position_lattice(&self) -> Lattice {
        Lattice {
            dim: self.dim,
            points: self.points,
            first: -self.half_extent,
            step: self.spacing(),
        }
    }

    /// Lattice of cells centred on the dual-lattice points, in ascending
    /// (centred) order from `-k_max + Δk` to `k_max`.
    pub fn momentum_lattice(&self) -> Lattice {
        Lattice {
            dim: self.dim,
            points: self.points,
            first: -self.k_max() + self.k_spacing(),
            step: self.k_spacing(),
        }
    }

    /// Sub-grid with the same spacing whose nodes coincide with the central
    /// nodes of `self`, covering roughly `[-extent, extent)`.
    pub fn central_subgrid(&self, extent: f64) -> Grid {
        let dx = self.spacing();
        let mut n = (2.0 * extent / dx).round() as usize;
        n += n % 2;
        let n = n.clamp(16, self.points);
        Grid {
            dim: self.dim,
            half_extent: n as f64 * dx / 2.0,
            points: n,
        }
    }
}

/// Axis-aligned cell lattice used for densities and sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lattice {
    pub dim: usize,
    pub points: usize,
    /// Centre of the first cell along each axis.
    pub first: f64,
    pub step: f64,
}

impl Lattice {
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    pub fn center(&self, j: usize) -> f64 {
        self.first + j as f64 * self.step
    }

    pub fn cell_volume(&self) -> f64 {
        self.step.powi(self.dim as i32)
    }

    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut rest = idx;
        for axis in (0..self.dim).rev() {
            out[axis] = rest % self.points;
            rest /= self.points;
        }
        out
    }

    /// Index of the cell containing coordinate `x` along one axis.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        let u = ((x - self.first) / self.step + 0.5).floor();
        if u >= 0.0 && (u as usize) < self.points {
            Some(u as usize)
        } else {
            None
        }
    }

    pub fn cell_of_point(&self, p: &Point) -> Option<usize> {
        let mut idx = 0;
        for x in &p[..self.dim] {
            idx = idx * self.points + self.cell_of(*x)?;
        }
        Some(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_and_k_range() {
        let g = Grid::new(1, 10.0, 16).unwrap();
        assert!((g.spacing() - 1.25).abs() < 1e-15);
        assert!((g.k_max() - 2.513_274_122_871_834_6).abs() < 1e-12);
        let ks = g.axis_wavenumbers();
        let max = ks.iter().cloned().fold(f64::MIN, f64::max);
        let min = ks.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - g.k_max()).abs() < 1e-12);
        assert!(min > -g.k_max());
    }

    #[test]
    fn node_counts() {
        assert_eq!(Grid::new(2, 5.0, 32).unwrap().len(), 1024);
        let g = Grid::new(3, 20.0, 64).unwrap();
        assert_eq!(g.len(), 262_144);
        assert!((g.spacing() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(1, 10.0, 17).is_err());
        assert!(Grid::new(1, 0.0, 16).is_err());
        assert!(Grid::new(1, -1.0, 16).is_err());
        assert!(Grid::new(1, 1.0, 14).is_err());
        assert!(Grid::new(4, 1.0, 16).is_err());
    }

    #[test]
    fn ravel_round_trip() {
        let g = Grid::new(3, 1.0, 16).unwrap();
        for idx in [0, 1, 17, 300, 4095] {
            assert_eq!(g.ravel(g.unravel(idx)), idx);
        }
    }

    #[test]
    fn subgrid_nodes_align() {
        let g = Grid::new(1, 40.0, 512).unwrap();
        let s = g.central_subgrid(10.0);
        let off = (g.points() - s.points()) / 2;
        for j in 0..s.points() {
            assert!((s.node(j) - g.node(j + off)).abs() < 1e-12);
        }
    }
}
