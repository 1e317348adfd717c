//! Numerical wave operator: the outgoing asymptote `ψ̂^out`, the local plane
//! wave `φ1` and the residuals `φ2 = ψ^out_t − φ1`, `φ3 = ψ_ac,t − ψ^out_t`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::field::{fourier_with, inverse_fourier_with, Field, Grid, Label, Spectrum, Transform};
use crate::propagator::{
    check_step_heuristics, evolve_free_with, step_count, SplitStep, BOUNDARY_MASS_THRESHOLD, SHELL_FRACTION,
};
use crate::{Error, Point, Potential};

/// Relative tolerance on the final wave-operator increment.
pub const CONVERGENCE_TOL: f64 = 1e-4;
/// Oversampling of the momentum lattice used to evaluate `ψ̂^out(q/t)`.
pub const K_OVERSAMPLE: usize = 4;

#[derive(Debug, Clone)]
pub struct OutgoingAsymptote {
    pub psi_out_hat: Spectrum,
    pub t_asym: f64,
    /// `(t_c, ‖e^{iH₀t_c}e^{−iHt_c}ψ_ac,0 − previous checkpoint‖)`.
    pub convergence_log: Vec<(f64, f64)>,
    pub converged: bool,
    /// Boundary monitor stayed green during the interacting run.
    pub valid: bool,
    /// `‖ψ_ac,0‖`, for the isometry check.
    pub input_norm: f64,
}

impl OutgoingAsymptote {
    pub fn isometry_defect(&self) -> f64 {
        (self.psi_out_hat.norm() - self.input_norm).abs()
    }

    /// `ψ^out` in position space at time zero.
    pub fn position_space(&self) -> Field {
        let t = Transform::for_grid(&self.psi_out_hat.grid);
        let mut f = inverse_fourier_with(&t, &self.psi_out_hat, Label::FreeAsymptote);
        f.time = 0.0;
        f
    }

    /// Freely evolved asymptote `ψ^out_t = e^{−iH₀t}ψ^out`.
    pub fn free_asymptote(&self, t: f64) -> Field {
        let tr = Transform::for_grid(&self.psi_out_hat.grid);
        evolve_free_with(&tr, &self.position_space(), t)
    }
}

/// `lim e^{iH₀t}e^{−iHt}ψ_ac,0` evaluated at `t = t_asym` with
/// `checkpoints` intermediate increments.
pub fn outgoing_asymptote(
    psi_ac0: &Field,
    potential: &Potential,
    t_asym: f64,
    dt: f64,
) -> Result<OutgoingAsymptote, Error> {
    outgoing_asymptote_with(psi_ac0, potential, t_asym, dt, 4, CONVERGENCE_TOL)
}

pub fn outgoing_asymptote_with(
    psi_ac0: &Field,
    potential: &Potential,
    t_asym: f64,
    dt: f64,
    checkpoints: usize,
    tol: f64,
) -> Result<OutgoingAsymptote, Error> {
    let grid = psi_ac0.grid;
    let transform = Transform::for_grid(&grid);
    let input_norm = psi_ac0.norm();
    let mut start = psi_ac0.clone();
    start.time = 0.0;
    if matches!(potential, Potential::Zero) || t_asym == 0.0 {
        let mut spec = fourier_with(&transform, &start);
        spec.time = 0.0;
        return Ok(OutgoingAsymptote {
            psi_out_hat: spec,
            t_asym: 0.0,
            convergence_log: Vec::new(),
            converged: true,
            valid: true,
            input_norm,
        });
    }
    let steps = step_count(t_asym, dt)?;
    check_step_heuristics(&grid, potential, dt)?;
    let checkpoints = checkpoints.clamp(1, steps);
    let stepper = SplitStep::new(grid, potential, dt);
    let mut psi = start.clone();
    let mut previous = start.clone();
    let mut log = Vec::with_capacity(checkpoints);
    let mass0 = input_norm * input_norm;
    let mut valid = true;
    let mut done = 0;
    for c in 1..=checkpoints {
        let target = steps * c / checkpoints;
        for _ in done..target {
            stepper.apply(&mut psi.values);
        }
        done = target;
        let t = done as f64 * dt;
        psi.time = t;
        if psi.shell_mass(SHELL_FRACTION) > BOUNDARY_MASS_THRESHOLD * mass0 {
            valid = false;
        }
        let mut pulled = evolve_free_with(&transform, &psi, -t);
        pulled.time = 0.0;
        log.push((t, pulled.sub(&previous).norm()));
        previous = pulled;
    }
    let last = log.last().map(|x| x.1).unwrap_or(0.0);
    let converged = last < tol * input_norm.max(f64::MIN_POSITIVE);
    let mut spec = fourier_with(&transform, &previous);
    spec.time = 0.0;
    Ok(OutgoingAsymptote {
        psi_out_hat: spec,
        t_asym: done as f64 * dt,
        convergence_log: log,
        converged,
        valid,
        input_norm,
    })
}

/// Time after which the slowest relevant momentum (5th percentile of
/// `|k|` under `|ψ̂_ac,0|²`) has crossed three effective potential radii,
/// rounded up to a multiple of `dt` and capped at `t_max`.
pub fn default_t_asym(psi_ac0: &Field, potential: &Potential, dt: f64, t_max: f64) -> f64 {
    let r_eff = potential.effective_radius(1e-6);
    if r_eff == 0.0 {
        return 0.0;
    }
    let spec = fourier_with(&Transform::for_grid(&psi_ac0.grid), psi_ac0);
    let mut speeds: Vec<(f64, f64)> = spec
        .values
        .iter()
        .enumerate()
        .map(|(i, z)| (crate::norm(&spec.grid.wavevector(i)), z.norm_sqr()))
        .collect();
    speeds.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = speeds.iter().map(|s| s.1).sum();
    let mut acc = 0.0;
    let mut k5 = 0.0;
    for (k, w) in &speeds {
        acc += w;
        if acc >= 0.05 * total {
            k5 = *k;
            break;
        }
    }
    let t = if k5 > 0.0 { 3.0 * r_eff / k5 } else { t_max };
    let t = (t / dt).ceil() * dt;
    t.min(t_max)
}

/// `ψ̂^out` on a refined momentum lattice with cubic lookup.
#[derive(Debug, Clone)]
pub struct MomentumInterpolator {
    dim: usize,
    points: usize,
    first: f64,
    step: f64,
    k_max: f64,
    values: Vec<Complex64>,
}

impl MomentumInterpolator {
    /// Band-limited refinement: zero-pad `ψ^out(x)` to an `oversample`-times
    /// larger box and transform back.
    pub fn new(psi_out_hat: &Spectrum, oversample: usize) -> Self {
        let grid = psi_out_hat.grid;
        let coarse = Transform::for_grid(&grid);
        let position = inverse_fourier_with(&coarse, psi_out_hat, Label::FreeAsymptote);
        let big = Grid::new(
            grid.dim(),
            grid.half_extent() * oversample as f64,
            grid.points() * oversample,
        )
        .expect("oversampled grid");
        let padded = crate::spectral::embed(&position, &big);
        let spec = fourier_with(&Transform::for_grid(&big), &padded);
        let lattice = big.momentum_lattice();
        Self {
            dim: grid.dim(),
            points: big.points(),
            first: lattice.first,
            step: lattice.step,
            k_max: big.k_max(),
            values: spec.centered(),
        }
    }

    pub fn k_max(&self) -> f64 {
        self.k_max
    }

    /// Tensor cubic Lagrange interpolation; `None` outside the lattice.
    pub fn eval(&self, k: &Point) -> Option<Complex64> {
        let mut base = [0usize; 3];
        let mut weights = [[0.0; 4]; 3];
        for a in 0..self.dim {
            let u = (k[a] - self.first) / self.step;
            let i = u.floor();
            if i < 1.0 || i + 2.0 >= self.points as f64 {
                return None;
            }
            base[a] = i as usize - 1;
            weights[a] = lagrange4(u - i);
        }
        let n = self.points;
        let mut acc = Complex64::default();
        match self.dim {
            1 => {
                for (i, w) in weights[0].iter().enumerate() {
                    acc += self.values[base[0] + i] * w;
                }
            }
            2 => {
                for i in 0..4 {
                    for j in 0..4 {
                        let w = weights[0][i] * weights[1][j];
                        acc += self.values[(base[0] + i) * n + base[1] + j] * w;
                    }
                }
            }
            _ => {
                for i in 0..4 {
                    for j in 0..4 {
                        for l in 0..4 {
                            let w = weights[0][i] * weights[1][j] * weights[2][l];
                            acc += self.values[((base[0] + i) * n + base[1] + j) * n + base[2] + l] * w;
                        }
                    }
                }
            }
        }
        Some(acc)
    }
}

/// Weights of the four-point Lagrange cubic at nodes −1, 0, 1, 2 for
/// fractional offset `f ∈ [0, 1)`.
fn lagrange4(f: f64) -> [f64; 4] {
    [
        -f * (f - 1.0) * (f - 2.0) / 6.0,
        (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
        -(f + 1.0) * f * (f - 2.0) / 2.0,
        (f + 1.0) * f * (f - 1.0) / 6.0,
    ]
}

/// `φ1(q,t) = (it)^{−d/2} e^{i|q|²/(2t)} ψ̂^out(q/t)` on the nodes of `grid`.
/// Returns the field and the number of nodes whose `q/t` fell outside the
/// momentum lattice (set to zero).
pub fn local_plane_wave(interp: &MomentumInterpolator, t: f64, grid: &Grid) -> Result<(Field, usize), Error> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("t must be positive, got {t}")));
    }
    let d = grid.dim() as f64;
    let prefactor = Complex64::from_polar(t.powf(-d / 2.0), -PI * d / 4.0);
    let mut outside = 0;
    let values = (0..grid.len())
        .map(|i| {
            let q = grid.position(i);
            let r2: f64 = q.iter().map(|x| x * x).sum();
            let k = [q[0] / t, q[1] / t, q[2] / t];
            match interp.eval(&k) {
                Some(z) => prefactor * Complex64::from_polar(1.0, r2 / (2.0 * t)) * z,
                None => {
                    outside += 1;
                    Complex64::default()
                }
            }
        })
        .collect();
    Ok((Field::new(*grid, values, t, Label::Phi1)?, outside))
}

#[derive(Debug, Clone)]
pub struct PlaneWaveDecomposition {
    pub phi1: Field,
    pub phi2: Field,
    pub phi3: Field,
    pub diagnostics: ResidualDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualDiagnostics {
    pub time: f64,
    /// `sup_q |φ2|·t²`.
    pub phi2_sup_t2: f64,
    pub phi2_sup: f64,
    /// `sup_{|q| ≥ L/2} |φ3|·|q|(t + |q|)`.
    pub phi3_weighted_sup: f64,
    /// `‖ψ_ac,t − φ1‖`.
    pub ac_minus_phi1: f64,
}

pub fn residuals(psi_ac_t: &Field, psi_out_t: &Field, phi1: &Field) -> Result<PlaneWaveDecomposition, Error> {
    if psi_ac_t.grid != psi_out_t.grid || psi_ac_t.grid != phi1.grid {
        return Err(Error::InvalidArgument("residual fields must share a grid".into()));
    }
    let t = psi_ac_t.time;
    let phi2 = psi_out_t.sub(phi1).with_label(Label::Phi2);
    let phi3 = psi_ac_t.sub(psi_out_t).with_label(Label::Phi3);
    let grid = psi_ac_t.grid;
    let phi2_sup = phi2.max_abs();
    let half = grid.half_extent() / 2.0;
    let phi3_weighted_sup = phi3
        .values
        .iter()
        .enumerate()
        .filter_map(|(i, z)| {
            let r = crate::norm(&grid.position(i));
            (r >= half).then(|| z.norm() * r * (t + r))
        })
        .fold(0.0, f64::max);
    let ac_minus_phi1 = psi_ac_t.sub(phi1).norm();
    Ok(PlaneWaveDecomposition {
        diagnostics: ResidualDiagnostics {
            time: t,
            phi2_sup_t2: phi2_sup * t * t,
            phi2_sup,
            phi3_weighted_sup,
            ac_minus_phi1,
        },
        phi1: phi1.clone(),
        phi2,
        phi3,
    })
}

/// Decay constants of `ψ̂^out`, reported rather than enforced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    /// `sup_k ⟨k⟩⁵|ψ̂^out(k)|`.
    pub weighted_sup: f64,
    /// Same sup restricted to `|k| ≤ k_max/2`.
    pub inner_weighted_sup: f64,
    /// `sup_k |∂_{|k|}ψ̂^out|` by central differences.
    pub radial_derivative_sup: f64,
    /// The weighted sup is attained in the outer half of the lattice, i.e.
    /// it keeps growing with `k_max`.
    pub growing: bool,
}

pub fn regularity_report(psi_out_hat: &Spectrum) -> RegularityReport {
    let grid = psi_out_hat.grid;
    let values = psi_out_hat.centered();
    let lattice = grid.momentum_lattice();
    let n = grid.points();
    let d = grid.dim();
    let half = grid.k_max() / 2.0;
    let mut weighted = 0.0f64;
    let mut inner = 0.0f64;
    let mut radial = 0.0f64;
    for (i, z) in values.iter().enumerate() {
        let ix = lattice.unravel(i);
        let mut k = [0.0; 3];
        for a in 0..d {
            k[a] = lattice.center(ix[a]);
        }
        let r = crate::norm(&k);
        let w = (1.0 + r * r).powf(2.5) * z.norm();
        weighted = weighted.max(w);
        if r <= half {
            inner = inner.max(w);
        }
        if r == 0.0 || ix[..d].iter().any(|&j| j == 0 || j + 1 == n) {
            continue;
        }
        let mut dr = Complex64::default();
        for a in 0..d {
            let mut up = ix;
            let mut down = ix;
            up[a] += 1;
            down[a] -= 1;
            let ravel = |m: [usize; 3]| m[..d].iter().fold(0, |acc, &j| acc * n + j);
            let da = (values[ravel(up)] - values[ravel(down)]) / (2.0 * lattice.step);
            dr += da * (k[a] / r);
        }
        radial = radial.max(dr.norm());
    }
    RegularityReport {
        weighted_sup: weighted,
        inner_weighted_sup: inner,
        radial_derivative_sup: radial,
        growing: weighted > inner * (1.0 + 1e-9),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{packet_field, FreeGaussian};
    use crate::field::fourier;

    #[test]
    fn free_asymptote_is_initial_spectrum() {
        let g = Grid::new(1, 30.0, 256).unwrap();
        let psi = packet_field(g, &[0.0; 3], 1.0, &[1.0, 0.0, 0.0]);
        let a = outgoing_asymptote(&psi, &Potential::Zero, 10.0, 0.01).unwrap();
        assert_eq!(a.psi_out_hat.values, fourier(&psi).values);
        assert!(a.converged && a.valid);
    }

    #[test]
    fn isometry_and_momentum_over_a_well() {
        let g = Grid::new(1, 160.0, 1024).unwrap();
        let v = Potential::GaussianWell { v0: 1.0, w: 1.0 };
        let packet = packet_field(g, &[-25.0, 0.0, 0.0], 3.0, &[2.0, 0.0, 0.0]);
        // the well binds one level; only the scattering part has an asymptote
        let b = crate::spectral::bound_states(&v, &g, 4, 1e-9).unwrap();
        let psi = crate::spectral::split(&packet, &b.levels).psi_ac0;
        let a = outgoing_asymptote(&psi, &v, 45.0, 0.005).unwrap();
        assert!(a.isometry_defect() < 1e-4);
        assert!(a.converged, "{:?}", a.convergence_log);
        assert!(a.valid);
        let tail: Vec<f64> = a.convergence_log.iter().map(|x| x.1).collect();
        assert!(tail[tail.len() - 1] <= tail[tail.len() / 2]);
        // mean momentum of the asymptote equals that of the late interacting state
        let run = crate::propagator::evolve(&psi, &v, 45.0, 0.005, 9000, &Default::default()).unwrap();
        let late = fourier(run.frames.last().unwrap()).mean_wavevector();
        assert!((a.psi_out_hat.mean_wavevector()[0] - late[0]).abs() < 1e-3);
    }

    #[test]
    fn plane_wave_modulus_and_norm() {
        let g = Grid::new(1, 60.0, 1024).unwrap();
        let psi = packet_field(g, &[0.0; 3], 1.0, &[2.0, 0.0, 0.0]);
        let a = outgoing_asymptote(&psi, &Potential::Zero, 0.0, 0.01).unwrap();
        let interp = MomentumInterpolator::new(&a.psi_out_hat, K_OVERSAMPLE);
        let t = 8.0;
        let (phi1, outside) = local_plane_wave(&interp, t, &g).unwrap();
        assert_eq!(outside, 0);
        assert!((phi1.norm() - a.psi_out_hat.norm()).abs() < 1e-3);
        // |φ1(q,t)| = t^{-1/2}|ψ̂(q/t)| with the analytic |ψ̂| of the packet
        let oracle = FreeGaussian::new(0.0, 1.0, 2.0);
        for (i, z) in phi1.values.iter().enumerate().step_by(37) {
            let k = g.node(i) / t;
            let exact = (2.0 / PI).powf(0.25) * (-(k - oracle.k0).powi(2)).exp();
            assert!((z.norm() - exact / t.sqrt()).abs() < 1e-6);
        }
        assert!(local_plane_wave(&interp, 0.0, &g).is_err());
    }

    #[test]
    fn plane_wave_approximates_late_free_packet() {
        let sigma = 1.0;
        let g = Grid::new(1, 200.0, 2048).unwrap();
        let oracle = FreeGaussian::new(0.0, sigma, 1.0);
        let psi = packet_field(g, &[0.0; 3], sigma, &[1.0, 0.0, 0.0]);
        let a = outgoing_asymptote(&psi, &Potential::Zero, 0.0, 0.01).unwrap();
        let interp = MomentumInterpolator::new(&a.psi_out_hat, K_OVERSAMPLE);
        // ‖ψ_t − φ1‖ ≈ ‖(e^{iy²/2t} − 1)ψ0‖ ≈ √3σ²/(2t)
        let error = |t: f64| {
            let (phi1, _) = local_plane_wave(&interp, t, &g).unwrap();
            let exact = Field::from_fn(g, t, Label::Full, |p| oracle.psi(p[0], t));
            exact.sub(&phi1).norm() / exact.norm()
        };
        let (e20, e40) = (error(20.0), error(40.0));
        let predicted = 3f64.sqrt() * sigma * sigma / 80.0;
        assert!((e40 - predicted).abs() < 0.1 * predicted, "{e40} vs {predicted}");
        assert!((e20 / e40 - 2.0).abs() < 0.1);
    }

    #[test]
    fn residuals_of_free_packet() {
        let g = Grid::new(1, 120.0, 2048).unwrap();
        let psi = packet_field(g, &[0.0; 3], 1.0, &[1.0, 0.0, 0.0]);
        let a = outgoing_asymptote(&psi, &Potential::Zero, 0.0, 0.01).unwrap();
        let interp = MomentumInterpolator::new(&a.psi_out_hat, K_OVERSAMPLE);
        let mut prev = f64::INFINITY;
        for t in [10.0, 20.0, 40.0] {
            let out = a.free_asymptote(t);
            let (phi1, _) = local_plane_wave(&interp, t, &g).unwrap();
            let r = residuals(&out, &out, &phi1).unwrap();
            assert_eq!(r.phi3.max_abs(), 0.0);
            let sum = r.phi1.add(&r.phi2).add(&r.phi3);
            assert!(sum.sub(&out).max_abs() < 1e-14);
            assert!(r.diagnostics.ac_minus_phi1 < prev);
            assert!(r.diagnostics.phi2_sup_t2.is_finite());
            prev = r.diagnostics.ac_minus_phi1;
        }
    }

    #[test]
    fn regularity_examples() {
        let g = Grid::new(1, 30.0, 512).unwrap();
        let psi = packet_field(g, &[0.0; 3], 1.0, &[1.0, 0.0, 0.0]);
        let r = regularity_report(&fourier(&psi));
        assert!(r.weighted_sup.is_finite() && r.radial_derivative_sup.is_finite());
        assert!(!r.growing);
        let slow = Spectrum {
            grid: g,
            values: (0..g.len())
                .map(|m| {
                    let k = g.wavenumber(m);
                    Complex64::new((1.0 + k * k).powf(-1.5), 0.0)
                })
                .collect(),
            time: 0.0,
        };
        assert!(regularity_report(&slow).growing);
        // the V = 0 asymptote reports exactly like the initial spectrum
        let a = outgoing_asymptote(&psi, &Potential::Zero, 0.0, 0.01).unwrap();
        assert_eq!(regularity_report(&a.psi_out_hat), r);
    }
}
