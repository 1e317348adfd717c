//! Numerical laboratory for Bohmian trajectories in potential scattering.
//!
//! Wave functions live on a periodic lattice and evolve by split-step
//! Fourier propagation. Bound states come from imaginary-time relaxation,
//! the outgoing asymptote from a numerical wave operator, and trajectory
//! ensembles are integrated through stored frames of `ψ_t`. The `analysis`
//! module turns ensembles into statistics on asymptotic velocities, the
//! bound/scattering split and the associated decay rates.
//!
//! Units are `ħ = m = 1`, so `H = −Δ/2 + V` and the guidance velocity is
//! `Im(∇ψ/ψ)`.

// Guards are written as `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod analytic;
pub mod asymptotics;
pub mod field;
pub mod potentials;
pub mod propagator;
pub mod spectral;
pub mod stats;
pub mod trajectories;

mod error;

pub use error::Error;
pub use field::{Field, Grid, Label, Spectrum};
pub use potentials::Potential;

/// Position or wavevector; components beyond the grid dimension are zero.
pub type Point = [f64; 3];

pub(crate) fn norm(p: &Point) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>().sqrt()
}
