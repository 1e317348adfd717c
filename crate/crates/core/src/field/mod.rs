//! Grids, complex fields on them, the continuum-normalised Fourier pair,
//! spectral gradients, weighted norms and Born-rule sampling.

mod grid;
mod transform;

pub use grid::{Grid, Lattice};
pub use transform::Transform;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{Error, Point};

/// What a stored field represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    /// Full wave function `ψ_t`.
    Full,
    /// Scattering component `ψ_ac`.
    Scattering,
    /// Bound component `ψ_pp`.
    Bound,
    /// Freely evolving outgoing asymptote `ψ^out_t` in position space.
    FreeAsymptote,
    Phi1,
    Phi2,
    Phi3,
    Eigenstate,
    /// Momentum-space outgoing asymptote.
    PsiOutHat,
}

impl Label {
    pub const ALL: [Label; 9] = [
        Label::Full,
        Label::Scattering,
        Label::Bound,
        Label::FreeAsymptote,
        Label::Phi1,
        Label::Phi2,
        Label::Phi3,
        Label::Eigenstate,
        Label::PsiOutHat,
    ];

    pub fn code(self) -> u32 {
        Self::ALL.iter().position(|l| *l == self).unwrap() as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Full => "psi",
            Label::Scattering => "psi_ac",
            Label::Bound => "psi_pp",
            Label::FreeAsymptote => "psi_out",
            Label::Phi1 => "phi1",
            Label::Phi2 => "phi2",
            Label::Phi3 => "phi3",
            Label::Eigenstate => "eigenstate",
            Label::PsiOutHat => "psi_out_hat",
        }
    }
}

/// Complex field on the position lattice of a [`Grid`].
///
/// `values.len() == grid.len()` always holds; values are stored row-major
/// with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<Complex64>,
    pub time: f64,
    pub label: Label,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<Complex64>, time: f64, label: Label) -> Result<Self, Error> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                expected: grid.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            grid,
            values,
            time,
            label,
        })
    }

    pub fn zeros(grid: Grid, time: f64, label: Label) -> Self {
        Self {
            grid,
            values: vec![Complex64::default(); grid.len()],
            time,
            label,
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: Grid, time: f64, label: Label, f: impl Fn(&Point) -> Complex64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.position(i))).collect();
        Self {
            grid,
            values,
            time,
            label,
        }
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = label;
        self
    }

    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// `⟨self, other⟩ = Σ conj(self)·other·Δx^d`.
    pub fn inner(&self, other: &Field) -> Complex64 {
        inner(&self.values, &other.values) * self.grid.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn normalized(mut self) -> Result<Self, Error> {
        let norm = self.norm();
        if !(norm > 0.0) {
            return Err(Error::ZeroNorm);
        }
        self.values.iter_mut().for_each(|z| *z /= norm);
        Ok(self)
    }

    /// `self - other`, keeping grid, time and label of `self`.
    pub fn sub(&self, other: &Field) -> Field {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Field { values, ..self.clone() }
    }

    pub fn add(&self, other: &Field) -> Field {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Field { values, ..self.clone() }
    }

    /// Mass inside the outer shell of relative thickness `fraction`.
    pub fn shell_mass(&self, fraction: f64) -> f64 {
        let dv = self.grid.cell_volume();
        self.values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.in_outer_shell(*i, fraction))
            .map(|(_, z)| z.norm_sqr() * dv)
            .sum()
    }

    pub fn density(&self) -> Density {
        Density::new(
            self.grid.position_lattice(),
            self.values.iter().map(|z| z.norm_sqr()).collect(),
        )
    }
}

/// Momentum-space field on the dual lattice of a [`Grid`], FFT ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub grid: Grid,
    pub values: Vec<Complex64>,
    pub time: f64,
}

impl Spectrum {
    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.k_cell_volume()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Values reordered so that wavenumbers ascend along every axis, matching
    /// [`Grid::momentum_lattice`].
    pub fn centered(&self) -> Vec<Complex64> {
        let g = &self.grid;
        let n = g.points();
        // FFT slot n/2 holds +k_max, so ascending order starts at slot n/2+1
        let shift = n / 2 + 1;
        (0..g.len())
            .map(|c| {
                let ci = g.unravel(c);
                let mut fi = [0; 3];
                for axis in 0..g.dim() {
                    fi[axis] = (ci[axis] + shift) % n;
                }
                self.values[g.ravel(fi)]
            })
            .collect()
    }

    pub fn density(&self) -> Density {
        Density::new(
            self.grid.momentum_lattice(),
            self.centered().iter().map(|z| z.norm_sqr()).collect(),
        )
    }

    /// Expectation of `k` under `|ψ̂|²` (normalised).
    pub fn mean_wavevector(&self) -> Point {
        let mut acc = [0.0; 3];
        let mut mass = 0.0;
        for (i, z) in self.values.iter().enumerate() {
            let w = z.norm_sqr();
            let k = self.grid.wavevector(i);
            for a in 0..self.grid.dim() {
                acc[a] += w * k[a];
            }
            mass += w;
        }
        acc.iter_mut().for_each(|x| *x /= mass);
        acc
    }
}

pub(crate) fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Per-slot factor turning a raw DFT into the continuum transform
/// `(2π)^{-d/2} ∫ e^{-ik·q} ψ(q) dq` on the node lattice starting at `-L`.
fn continuum_factor(grid: &Grid, idx: usize) -> f64 {
    let ix = grid.unravel(idx);
    let parity: usize = ix[..grid.dim()].iter().sum();
    let sign = if parity.is_multiple_of(2) { 1.0 } else { -1.0 };
    sign * (grid.spacing() / (2.0 * PI).sqrt()).powi(grid.dim() as i32)
}

pub fn fourier(psi: &Field) -> Spectrum {
    fourier_with(&Transform::for_grid(&psi.grid), psi)
}

pub fn fourier_with(transform: &Transform, psi: &Field) -> Spectrum {
    let mut values = psi.values.clone();
    transform.forward(&mut values);
    for (i, z) in values.iter_mut().enumerate() {
        *z *= continuum_factor(&psi.grid, i);
    }
    Spectrum {
        grid: psi.grid,
        values,
        time: psi.time,
    }
}

pub fn inverse_fourier(spec: &Spectrum, label: Label) -> Field {
    inverse_fourier_with(&Transform::for_grid(&spec.grid), spec, label)
}

pub fn inverse_fourier_with(transform: &Transform, spec: &Spectrum, label: Label) -> Field {
    let mut values = spec.values.clone();
    for (i, z) in values.iter_mut().enumerate() {
        *z /= continuum_factor(&spec.grid, i);
    }
    transform.inverse(&mut values);
    Field {
        grid: spec.grid,
        values,
        time: spec.time,
        label,
    }
}

/// Per-axis wavenumbers used for differentiation: the Nyquist slot is zeroed
/// so that derivatives of real fields stay real.
pub(crate) fn derivative_wavenumbers(grid: &Grid) -> Vec<f64> {
    let n = grid.points();
    (0..n)
        .map(|m| if m == n / 2 { 0.0 } else { grid.wavenumber(m) })
        .collect()
}

/// Multiplies a raw FFT-ordered spectrum by `i·k_axis`.
pub(crate) fn differentiate_spectrum(grid: &Grid, spec: &[Complex64], axis: usize, k: &[f64]) -> Vec<Complex64> {
    spec.iter()
        .enumerate()
        .map(|(i, z)| {
            let m = grid.unravel(i)[axis];
            Complex64::new(0.0, k[m]) * z
        })
        .collect()
}

/// Spectral gradient, one field per axis.
pub fn gradient(psi: &Field) -> Vec<Field> {
    let t = Transform::for_grid(&psi.grid);
    gradient_with(&t, psi)
}

pub fn gradient_with(transform: &Transform, psi: &Field) -> Vec<Field> {
    let grid = psi.grid;
    let mut spec = psi.values.clone();
    transform.forward(&mut spec);
    let k = derivative_wavenumbers(&grid);
    (0..grid.dim())
        .map(|axis| {
            let mut d = differentiate_spectrum(&grid, &spec, axis, &k);
            transform.inverse(&mut d);
            Field {
                grid,
                values: d,
                time: psi.time,
                label: psi.label,
            }
        })
        .collect()
}

/// `‖⟨q⟩^s ψ‖_{L²}` with `⟨q⟩ = (1 + |q|²)^{1/2}`.
pub fn weighted_norm(psi: &Field, s: f64) -> Result<f64, Error> {
    if !(s >= 0.0) {
        return Err(Error::InvalidArgument(format!("weight exponent must be >= 0, got {s}")));
    }
    let g = &psi.grid;
    let sum: f64 = psi
        .values
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let p = g.position(i);
            let r2: f64 = p.iter().map(|x| x * x).sum();
            (1.0 + r2).powf(s) * z.norm_sqr()
        })
        .sum();
    Ok((sum * g.cell_volume()).sqrt())
}

/// Nonnegative piecewise-constant density on a cell lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    pub lattice: Lattice,
    pub weights: Vec<f64>,
    /// `Σ weights · cell_volume`.
    pub mass: f64,
}

impl Density {
    pub fn new(lattice: Lattice, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), lattice.len());
        let mass = weights.iter().sum::<f64>() * lattice.cell_volume();
        Self { lattice, weights, mass }
    }

    /// Marginal weights along `axis`, integrated over the other axes.
    pub fn marginal(&self, axis: usize) -> Vec<f64> {
        let l = &self.lattice;
        let mut out = vec![0.0; l.points];
        let transverse = l.step.powi(l.dim as i32 - 1);
        for (i, w) in self.weights.iter().enumerate() {
            out[l.unravel(i)[axis]] += w * transverse;
        }
        out
    }

    /// Draws `count` i.i.d. points: a cell chosen with probability
    /// proportional to its weight, then a uniform position inside it.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<Vec<Point>, Error> {
        let mut cdf = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        if !(acc > 0.0) {
            return Err(Error::ZeroNorm);
        }
        let l = &self.lattice;
        let out = (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let cell = cdf.partition_point(|c| *c <= u).min(cdf.len() - 1);
                // skip empty cells that share a cumulative value
                let cell = if self.weights[cell] > 0.0 {
                    cell
                } else {
                    (cell..cdf.len()).find(|&c| self.weights[c] > 0.0).unwrap_or(cell)
                };
                let ix = l.unravel(cell);
                let mut p = [0.0; 3];
                for a in 0..l.dim {
                    p[a] = l.center(ix[a]) + (rng.random::<f64>() - 0.5) * l.step;
                }
                p
            })
            .collect();
        Ok(out)
    }
}

/// Born-rule sample of `count` positions from `|ψ|²`, reproducible from `seed`.
pub fn sample_density(psi: &Field, count: usize, seed: u64) -> Result<Vec<Point>, Error> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    psi.density().sample(count, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_statistic, PiecewiseCdf};

    fn gaussian(grid: Grid, sigma: f64) -> Field {
        Field::from_fn(grid, 0.0, Label::Full, |p| {
            let r2: f64 = p.iter().map(|x| x * x).sum();
            Complex64::new((-r2 / (4.0 * sigma * sigma)).exp(), 0.0)
        })
        .normalized()
        .unwrap()
    }

    fn pseudo_random(grid: Grid, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len())
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        Field::new(grid, values, 0.0, Label::Full).unwrap()
    }

    #[test]
    fn fourier_round_trip_and_parseval_all_dims() {
        for (dim, n) in [(1, 256), (2, 32), (3, 16)] {
            let g = Grid::new(dim, 7.0, n).unwrap();
            let psi = pseudo_random(g, 3);
            let spec = fourier(&psi);
            assert!((spec.norm() - psi.norm()).abs() < 1e-10 * psi.norm());
            let back = inverse_fourier(&spec, Label::Full);
            let err = back.sub(&psi).norm() / psi.norm();
            assert!(err < 1e-12, "dim {dim}: {err}");
        }
    }

    #[test]
    fn constant_field_concentrates_at_zero() {
        let g = Grid::new(1, 5.0, 64).unwrap();
        let psi = Field::from_fn(g, 0.0, Label::Full, |_| Complex64::new(1.0, 0.0));
        let spec = fourier(&psi);
        assert!(spec.values[0].norm() > 1.0);
        assert!(spec.values[1..].iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn gaussian_transform_matches_analytic_pair() {
        // e^{-q²/(4σ²)} ↦ σ√2 e^{-σ²k²}
        let sigma = 1.3;
        let g = Grid::new(1, 30.0, 512).unwrap();
        let psi = Field::from_fn(g, 0.0, Label::Full, |p| {
            Complex64::new((-p[0] * p[0] / (4.0 * sigma * sigma)).exp(), 0.0)
        });
        let spec = fourier(&psi);
        for (m, z) in spec.values.iter().enumerate() {
            let k = g.wavenumber(m);
            let exact = sigma * 2f64.sqrt() * (-sigma * sigma * k * k).exp();
            assert!((z - exact).norm() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn gradient_of_plane_wave() {
        let g = Grid::new(2, 4.0, 32).unwrap();
        let k0 = [3.0 * g.k_spacing(), -2.0 * g.k_spacing()];
        let psi = Field::from_fn(g, 0.0, Label::Full, |p| {
            Complex64::from_polar(1.0, k0[0] * p[0] + k0[1] * p[1])
        });
        let grad = gradient(&psi);
        for axis in 0..2 {
            for (d, v) in grad[axis].values.iter().zip(&psi.values) {
                assert!((d - Complex64::new(0.0, k0[axis]) * v).norm() < 1e-11);
            }
        }
    }

    #[test]
    fn gradient_of_real_gaussian_is_real_and_odd() {
        let g = Grid::new(1, 10.0, 128).unwrap();
        let psi = gaussian(g, 1.0);
        let d = &gradient(&psi)[0].values;
        let n = g.points();
        for j in 1..n {
            assert!(d[j].im.abs() < 1e-12);
            assert!((d[j].re + d[n - j].re).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_agrees_with_fourth_order_differences() {
        let g = Grid::new(1, 12.0, 1024).unwrap();
        let psi = Field::from_fn(g, 0.0, Label::Full, |p| {
            let x = p[0];
            Complex64::new(
                (-(x - 1.0).powi(2) / 3.0).exp(),
                0.5 * (-(x + 0.5).powi(2) / 2.0).exp() * (0.7 * x).sin(),
            )
        });
        let d = gradient(&psi);
        let h = g.spacing();
        let v = &psi.values;
        let n = g.points();
        for j in 2..n - 2 {
            let fd = (-v[j + 2] + 8.0 * v[j + 1] - 8.0 * v[j - 1] + v[j - 2]) / (12.0 * h);
            assert!((fd - d[0].values[j]).norm() < 1e-6, "node {j}");
        }
    }

    #[test]
    fn weighted_norms() {
        let g = Grid::new(1, 20.0, 512).unwrap();
        let psi = gaussian(g, 1.0);
        assert!((weighted_norm(&psi, 0.0).unwrap() - 1.0).abs() < 1e-8);
        // |ψ|² is N(0,1): E[(1+q²)²] = 1 + 2 + 3 = 6
        assert!((weighted_norm(&psi, 2.0).unwrap() - 6f64.sqrt()).abs() < 1e-8);
        let shifted = Field::from_fn(g, 0.0, Label::Full, |p| {
            Complex64::new((-(p[0] - 2.0).powi(2) / 4.0).exp(), 0.0)
        })
        .normalized()
        .unwrap();
        assert!(weighted_norm(&shifted, 2.0).unwrap() > weighted_norm(&psi, 2.0).unwrap());
        assert!(weighted_norm(&psi, -1.0).is_err());
    }

    #[test]
    fn uniform_density_moments() {
        let g = Grid::new(1, 3.0, 64).unwrap();
        let psi = Field::from_fn(g, 0.0, Label::Full, |_| Complex64::new(1.0, 0.0));
        let n = 20_000;
        let s = sample_density(&psi, n, 7).unwrap();
        let mean = s.iter().map(|p| p[0]).sum::<f64>() / n as f64;
        let var = s.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>() / n as f64;
        let tol = 5.0 / (n as f64).sqrt();
        // cells are centred on the nodes −L, …, L − Δx
        assert!((mean + g.spacing() / 2.0).abs() < tol);
        assert!((var - 3.0).abs() < 3.0 * tol);
    }

    #[test]
    fn gaussian_sampling_passes_ks() {
        let g = Grid::new(1, 10.0, 1024).unwrap();
        let psi = gaussian(g, 1.0);
        let n = 10_000;
        let s: Vec<f64> = sample_density(&psi, n, 11).unwrap().iter().map(|p| p[0]).collect();
        // |ψ|² of e^{−q²/4} is a unit normal
        let ks = ks_statistic(&s, |x| crate::stats::normal_cdf(x, 0.0, 1.0));
        assert!(ks < 1.63 / (n as f64).sqrt(), "ks = {ks}");
        let piecewise = PiecewiseCdf::from_density(&psi.density(), 0);
        assert!(ks_statistic(&s, |x| piecewise.cdf(x)) < 1.63 / (n as f64).sqrt());
    }

    #[test]
    fn half_line_support_yields_no_samples_in_null_half() {
        let g = Grid::new(1, 5.0, 64).unwrap();
        let psi = Field::from_fn(g, 0.0, Label::Full, |p| {
            Complex64::new(if p[0] > 0.0 { 1.0 } else { 0.0 }, 0.0)
        });
        let s = sample_density(&psi, 5000, 1).unwrap();
        assert!(s.iter().all(|p| p[0] > 0.0));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let g = Grid::new(2, 5.0, 32).unwrap();
        let psi = gaussian(g, 1.0);
        assert_eq!(
            sample_density(&psi, 100, 5).unwrap(),
            sample_density(&psi, 100, 5).unwrap()
        );
        assert_ne!(
            sample_density(&psi, 100, 5).unwrap(),
            sample_density(&psi, 100, 6).unwrap()
        );
        assert!(sample_density(&psi, 0, 5).is_err());
    }
}
