//! Closed-form reference solutions used to build initial states and to
//! check the numerics.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::field::{Field, Grid, Label};
use crate::Point;

/// Freely evolving 1-D Gaussian packet
/// `ψ₀(x) = (2πσ²)^{−1/4} exp(−(x−c)²/(4σ²) + ik₀x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeGaussian {
    pub center: f64,
    pub sigma: f64,
    pub k0: f64,
}

impl FreeGaussian {
    pub fn new(center: f64, sigma: f64, k0: f64) -> Self {
        Self { center, sigma, k0 }
    }

    /// `ψ(x, t)` of the free evolution.
    pub fn psi(&self, x: f64, t: f64) -> Complex64 {
        let s2 = self.sigma * self.sigma;
        // a(t) = σ² + it/2
        let a = Complex64::new(s2, 0.5 * t);
        let norm = (2.0 * PI * s2).powf(-0.25);
        let shift = x - self.center - self.k0 * t;
        let exponent = -Complex64::new(shift * shift, 0.0) / (4.0 * a)
            + Complex64::new(0.0, self.k0 * x - 0.5 * self.k0 * self.k0 * t);
        norm * (Complex64::new(s2, 0.0) / a).sqrt() * exponent.exp()
    }

    /// Standard deviation of `|ψ_t|²`, `σ_t = σ√(1 + t²/(4σ⁴))`.
    pub fn width(&self, t: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.sigma * (1.0 + t * t / (4.0 * s2 * s2)).sqrt()
    }

    /// Bohmian trajectory `Q(t) = c + k₀t + (q₀ − c)σ_t/σ`.
    pub fn trajectory(&self, q0: f64, t: f64) -> f64 {
        self.center + self.k0 * t + (q0 - self.center) * self.width(t) / self.sigma
    }

    /// Velocity field `k₀ + (x − c − k₀t)·t/(4σ⁴ + t²)`.
    pub fn velocity(&self, x: f64, t: f64) -> f64 {
        let s4 = self.sigma.powi(4);
        self.k0 + (x - self.center - self.k0 * t) * t / (4.0 * s4 + t * t)
    }

    /// Asymptotic velocity `k₀ + (q₀ − c)/(2σ²)`.
    pub fn asymptotic_velocity(&self, q0: f64) -> f64 {
        self.k0 + (q0 - self.center) / (2.0 * self.sigma * self.sigma)
    }

    /// `|ψ̂(k)|²`: normal with mean `k₀` and standard deviation `1/(2σ)`.
    pub fn momentum_sd(&self) -> f64 {
        0.5 / self.sigma
    }
}

/// Normalised product Gaussian packet in `grid.dim()` dimensions.
pub fn packet_field(grid: Grid, center: &Point, sigma: f64, k0: &Point) -> Field {
    let d = grid.dim();
    let factors: Vec<FreeGaussian> = (0..d).map(|a| FreeGaussian::new(center[a], sigma, k0[a])).collect();
    Field::from_fn(grid, 0.0, Label::Full, |p| {
        factors.iter().enumerate().map(|(a, g)| g.psi(p[a], 0.0)).product()
    })
}

/// Bound spectrum of `−½∂² − λ(λ+1)/2·sech²q`: `E_n = −(λ−n)²/2` for
/// `n < λ`.
pub fn poschl_teller_levels(lambda: f64) -> Vec<f64> {
    (0..)
        .map(|n| lambda - n as f64)
        .take_while(|&m| m > 0.0)
        .map(|m| -0.5 * m * m)
        .collect()
}

/// Unnormalised Pöschl–Teller ground state `sech^λ(q)`.
pub fn poschl_teller_ground(lambda: f64, q: f64) -> f64 {
    q.cosh().powf(-lambda)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_gaussian_is_normalised_and_solves_free_equation() {
        let g = FreeGaussian::new(0.5, 0.9, 1.7);
        // i∂_tψ = −½∂²ψ by central differences
        let (x, t, h) = (1.3, 2.1, 1e-3);
        let dt = (g.psi(x, t + h) - g.psi(x, t - h)) / (2.0 * h);
        let dxx = (g.psi(x + h, t) - 2.0 * g.psi(x, t) + g.psi(x - h, t)) / (h * h);
        let residual = Complex64::i() * dt + 0.5 * dxx;
        assert!(residual.norm() < 1e-5);
        let mass: f64 = (-4000..4000)
            .map(|j| g.psi(j as f64 * 0.01, 3.0).norm_sqr() * 0.01)
            .sum();
        assert!((mass - 1.0).abs() < 1e-10);
    }

    #[test]
    fn velocity_matches_phase_gradient_and_trajectory() {
        let g = FreeGaussian::new(0.0, 1.0, 0.0);
        assert!((g.velocity(2.0, 2.0) - 0.5).abs() < 1e-15);
        let h = 1e-5;
        let (x, t) = (0.7, 1.4);
        let psi = g.psi(x, t);
        let dpsi = (g.psi(x + h, t) - g.psi(x - h, t)) / (2.0 * h);
        assert!(((dpsi / psi).im - g.velocity(x, t)).abs() < 1e-8);
        let q = g.trajectory(0.3, t);
        let dq = (g.trajectory(0.3, t + h) - g.trajectory(0.3, t - h)) / (2.0 * h);
        assert!((dq - g.velocity(q, t)).abs() < 1e-8);
    }

    #[test]
    fn poschl_teller_spectrum() {
        assert_eq!(poschl_teller_levels(1.0), vec![-0.5]);
        assert_eq!(poschl_teller_levels(2.0), vec![-2.0, -0.5]);
    }
}
