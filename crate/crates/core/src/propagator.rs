//! Time evolution: Strang split-step under `H = −Δ/2 + V` and exact free
//! evolution in momentum space, with norm, energy and boundary-mass logs.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_4;

use crate::field::{Field, Grid, Transform};
use crate::{Error, Potential};

/// Relative thickness of the monitored boundary shell.
pub const SHELL_FRACTION: f64 = 0.1;
/// Default tolerated fraction of the total mass inside the shell.
pub const BOUNDARY_MASS_THRESHOLD: f64 = 1e-6;

/// One Strang step `e^{−iV dt/2} e^{−iH₀ dt} e^{−iV dt/2}` with cached phases.
#[derive(Debug, Clone)]
pub struct SplitStep {
    grid: Grid,
    transform: Transform,
    half_potential: Vec<Complex64>,
    kinetic: Vec<Complex64>,
    dt: f64,
}

impl SplitStep {
    /// Any nonzero `dt`; negative steps run the evolution backwards.
    pub fn new(grid: Grid, potential: &Potential, dt: f64) -> Self {
        let v = potential.on_grid(&grid);
        Self::from_values(grid, &v, dt)
    }

    pub fn from_values(grid: Grid, v: &[f64], dt: f64) -> Self {
        let half_potential = v.iter().map(|&v| Complex64::from_polar(1.0, -0.5 * v * dt)).collect();
        let kinetic = grid
            .k_squared()
            .iter()
            .map(|&k2| Complex64::from_polar(1.0, -0.5 * k2 * dt))
            .collect();
        Self {
            grid,
            transform: Transform::for_grid(&grid),
            half_potential,
            kinetic,
            dt,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn apply(&self, values: &mut [Complex64]) {
        mul_assign(values, &self.half_potential);
        self.transform.forward(values);
        mul_assign(values, &self.kinetic);
        self.transform.inverse(values);
        mul_assign(values, &self.half_potential);
    }
}

fn mul_assign(values: &mut [Complex64], factors: &[Complex64]) {
    values.iter_mut().zip(factors).for_each(|(z, f)| *z *= f);
}

/// A single Strang step of length `dt > 0`.
pub fn step_full(psi: &Field, potential: &Potential, dt: f64) -> Result<Field, Error> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut out = psi.clone();
    SplitStep::new(psi.grid, potential, dt).apply(&mut out.values);
    out.time += dt;
    Ok(out)
}

/// Exact free evolution `F⁻¹[e^{−ik²t/2} Fψ]` for any real `t`.
pub fn evolve_free(psi: &Field, t: f64) -> Field {
    evolve_free_with(&Transform::for_grid(&psi.grid), psi, t)
}

pub fn evolve_free_with(transform: &Transform, psi: &Field, t: f64) -> Field {
    let mut out = psi.clone();
    transform.forward(&mut out.values);
    for (z, k2) in out.values.iter_mut().zip(psi.grid.k_squared()) {
        *z *= Complex64::from_polar(1.0, -0.5 * k2 * t);
    }
    transform.inverse(&mut out.values);
    out.time += t;
    out
}

/// `⟨ψ, Hψ⟩` with the kinetic term evaluated spectrally.
pub fn energy(psi: &Field, potential: &Potential) -> f64 {
    let grid = psi.grid;
    let mut spec = psi.values.clone();
    Transform::for_grid(&grid).forward(&mut spec);
    let kinetic: f64 = spec
        .iter()
        .zip(grid.k_squared())
        .map(|(z, k2)| 0.5 * k2 * z.norm_sqr())
        .sum::<f64>()
        * grid.cell_volume()
        / grid.len() as f64;
    let v = potential.on_grid(&grid);
    let pot: f64 = psi.values.iter().zip(&v).map(|(z, v)| v * z.norm_sqr()).sum::<f64>() * grid.cell_volume();
    kinetic + pot
}

/// Knobs for [`evolve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub shell_fraction: f64,
    pub boundary_threshold: f64,
    /// Record `⟨ψ,Hψ⟩` at every retained frame.
    pub track_energy: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            shell_fraction: SHELL_FRACTION,
            boundary_threshold: BOUNDARY_MASS_THRESHOLD,
            track_energy: true,
        }
    }
}

/// Per-frame bookkeeping of a run, shared by in-memory and streamed runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionLog {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    pub energies: Vec<f64>,
    /// Fraction of the initial mass in the outer shell at each frame.
    pub boundary_mass: Vec<f64>,
    pub valid: bool,
}

impl EvolutionLog {
    pub fn max_norm_drift(&self) -> f64 {
        let n0 = self.norms.first().copied().unwrap_or(0.0);
        self.norms.iter().map(|n| (n - n0).abs()).fold(0.0, f64::max)
    }

    pub fn max_relative_energy_drift(&self) -> f64 {
        let e0 = self.energies.first().copied().unwrap_or(0.0);
        let scale = e0.abs().max(f64::MIN_POSITIVE);
        self.energies.iter().map(|e| (e - e0).abs() / scale).fold(0.0, f64::max)
    }
}

/// Frames of `e^{−iHt}ψ₀` on the lattice `t_j = j·dt·stride`.
#[derive(Debug, Clone)]
pub struct EvolutionFrames {
    pub frames: Vec<Field>,
    pub potential: Potential,
    pub dt: f64,
    pub frame_stride: usize,
    pub log: EvolutionLog,
}

impl EvolutionFrames {
    pub fn times(&self) -> &[f64] {
        &self.log.times
    }

    pub fn is_valid(&self) -> bool {
        self.log.valid
    }

    pub fn grid(&self) -> Grid {
        self.frames[0].grid
    }

    /// Every `k`-th frame, keeping the last one.
    pub fn thinned(&self, k: usize) -> Vec<&Field> {
        let last = self.frames.len() - 1;
        self.frames
            .iter()
            .enumerate()
            .filter(|(i, _)| i % k == 0 || *i == last)
            .map(|(_, f)| f)
            .collect()
    }

    /// Frame whose time is closest to `t`.
    pub fn nearest(&self, t: f64) -> &Field {
        self.frames
            .iter()
            .min_by(|a, b| (a.time - t).abs().total_cmp(&(b.time - t).abs()))
            .unwrap()
    }
}

/// Validates `(T, dt)` and returns the number of steps.
pub fn step_count(t_final: f64, dt: f64) -> Result<usize, Error> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t_final > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "final time must be positive, got {t_final}"
        )));
    }
    let steps = (t_final / dt).round();
    if (steps * dt - t_final).abs() > 1e-9 * t_final {
        return Err(Error::InvalidArgument(format!(
            "final time {t_final} is not a multiple of dt {dt}"
        )));
    }
    Ok(steps as usize)
}

/// Checks the step-size heuristics `dt·max|V| < 0.1` and `dt·k_max²/2 < π/4`.
pub fn check_step_heuristics(grid: &Grid, potential: &Potential, dt: f64) -> Result<(), Error> {
    let vmax = potential.on_grid(grid).iter().map(|v| v.abs()).fold(0.0, f64::max);
    if dt * vmax >= 0.1 {
        return Err(Error::InvalidArgument(format!(
            "dt·max|V| = {} must stay below 0.1",
            dt * vmax
        )));
    }
    let kin = dt * grid.k_max().powi(2) / 2.0;
    if kin >= FRAC_PI_4 {
        return Err(Error::InvalidArgument(format!(
            "dt·k_max²/2 = {kin} must stay below π/4"
        )));
    }
    Ok(())
}

/// Streams the evolution, handing each retained frame to `sink` as it is
/// produced. Returns the bookkeeping log.
pub fn evolve_with(
    psi0: &Field,
    potential: &Potential,
    t_final: f64,
    dt: f64,
    frame_stride: usize,
    options: &EvolveOptions,
    mut sink: impl FnMut(&Field) -> Result<(), Error>,
) -> Result<EvolutionLog, Error> {
    let steps = step_count(t_final, dt)?;
    if frame_stride == 0 {
        return Err(Error::InvalidArgument("frame stride must be positive".into()));
    }
    check_step_heuristics(&psi0.grid, potential, dt)?;
    let stepper = SplitStep::new(psi0.grid, potential, dt);
    let mass0 = psi0.norm_sqr();
    let mut log = EvolutionLog {
        valid: true,
        ..Default::default()
    };
    let mut psi = psi0.clone();
    let t0 = psi0.time;
    let mut record = |psi: &Field, log: &mut EvolutionLog| -> Result<(), Error> {
        let shell = psi.shell_mass(options.shell_fraction) / mass0;
        if shell > options.boundary_threshold {
            log.valid = false;
        }
        log.times.push(psi.time);
        log.norms.push(psi.norm());
        if options.track_energy {
            log.energies.push(energy(psi, potential));
        }
        log.boundary_mass.push(shell);
        sink(psi)
    };
    record(&psi, &mut log)?;
    for step in 1..=steps {
        stepper.apply(&mut psi.values);
        psi.time = t0 + step as f64 * dt;
        if step % frame_stride == 0 || step == steps {
            record(&psi, &mut log)?;
        }
    }
    Ok(log)
}

/// Runs the evolution and keeps every retained frame in memory.
///
/// A boundary-mass breach does not abort; it clears `log.valid`.
pub fn evolve(
    psi0: &Field,
    potential: &Potential,
    t_final: f64,
    dt: f64,
    frame_stride: usize,
    options: &EvolveOptions,
) -> Result<EvolutionFrames, Error> {
    let mut frames = Vec::new();
    let log = evolve_with(psi0, potential, t_final, dt, frame_stride, options, |f| {
        frames.push(f.clone());
        Ok(())
    })?;
    Ok(EvolutionFrames {
        frames,
        potential: *potential,
        dt,
        frame_stride,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::FreeGaussian;
    use crate::field::Label;

    fn packet(grid: Grid, g: &FreeGaussian) -> Field {
        Field::from_fn(grid, 0.0, Label::Full, |p| g.psi(p[0], 0.0))
    }

    #[test]
    fn split_step_without_potential_is_free_evolution() {
        let g = Grid::new(1, 30.0, 256).unwrap();
        let psi = packet(g, &FreeGaussian::new(0.0, 1.0, 1.5));
        let a = step_full(&psi, &Potential::Zero, 0.3).unwrap();
        let b = evolve_free(&psi, 0.3);
        assert!(a.sub(&b).norm() < 1e-12);
        assert!((a.time - 0.3).abs() < 1e-15);
        assert!(step_full(&psi, &Potential::Zero, 0.0).is_err());
    }

    #[test]
    fn free_evolution_group_property_and_zero_mode() {
        let g = Grid::new(1, 30.0, 256).unwrap();
        let psi = packet(g, &FreeGaussian::new(-2.0, 1.2, 1.0));
        let back = evolve_free(&evolve_free(&psi, 4.0), -4.0);
        assert!(back.sub(&psi).norm() < 1e-12);
        let flat = Field::from_fn(g, 0.0, Label::Full, |_| Complex64::new(0.3, 0.1));
        assert!(evolve_free(&flat, 17.0).sub(&flat).norm() < 1e-12);
    }

    #[test]
    fn free_gaussian_width_and_centre() {
        let g = Grid::new(1, 60.0, 1024).unwrap();
        let oracle = FreeGaussian::new(0.0, 1.0, 2.0);
        let psi = evolve_free(&packet(g, &oracle), 5.0);
        let dens = psi.density();
        let x = g.axis_nodes();
        let mass: f64 = dens.weights.iter().sum();
        let mean = x.iter().zip(&dens.weights).map(|(x, w)| x * w).sum::<f64>() / mass;
        let var = x
            .iter()
            .zip(&dens.weights)
            .map(|(x, w)| (x - mean).powi(2) * w)
            .sum::<f64>()
            / mass;
        assert!((mean - 10.0).abs() < 1e-9);
        assert!((var.sqrt() - oracle.width(5.0)).abs() < 1e-9);
    }

    #[test]
    fn norm_drift_over_many_steps() {
        let g = Grid::new(1, 20.0, 256).unwrap();
        let psi = packet(g, &FreeGaussian::new(0.0, 1.0, 1.0));
        let v = Potential::GaussianWell { v0: 1.0, w: 1.0 };
        let stepper = SplitStep::new(g, &v, 0.01);
        let mut values = psi.values.clone();
        let n0 = psi.norm();
        let mut worst_step = 0.0f64;
        let mut prev = n0;
        for _ in 0..10_000 {
            stepper.apply(&mut values);
            let f = Field::new(g, values.clone(), 0.0, Label::Full).unwrap();
            let n = f.norm();
            worst_step = worst_step.max((n - prev).abs() / prev);
            prev = n;
        }
        assert!((prev - n0).abs() < 1e-8);
        assert!(worst_step < 1e-13);
    }

    #[test]
    fn strang_is_second_order() {
        // Richardson: differences between dt, dt/2, dt/4 shrink by ≈ 4
        let g = Grid::new(1, 25.0, 128).unwrap();
        let psi = packet(g, &FreeGaussian::new(-3.0, 1.0, 1.5));
        let v = Potential::GaussianWell { v0: 1.0, w: 1.0 };
        let run = |dt: f64| evolve(&psi, &v, 2.0, dt, 1_000_000, &EvolveOptions::default()).unwrap();
        let a = run(0.02);
        let b = run(0.01);
        let c = run(0.005);
        let last = |r: &EvolutionFrames| r.frames.last().unwrap().clone();
        let e1 = last(&a).sub(&last(&b)).norm();
        let e2 = last(&b).sub(&last(&c)).norm();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn time_reversal_interacting() {
        let g = Grid::new(1, 25.0, 512).unwrap();
        let psi = packet(g, &FreeGaussian::new(-3.0, 1.0, 1.5));
        let v = Potential::GaussianWell { v0: 1.0, w: 1.0 };
        let fwd = SplitStep::new(g, &v, 0.01);
        let bwd = SplitStep::new(g, &v, -0.01);
        let mut values = psi.values.clone();
        for _ in 0..300 {
            fwd.apply(&mut values);
        }
        for _ in 0..300 {
            bwd.apply(&mut values);
        }
        let back = Field::new(g, values, 0.0, Label::Full).unwrap();
        assert!(back.sub(&psi).norm() < 1e-10);
    }

    #[test]
    fn evolve_logs_and_validity() {
        let g = Grid::new(1, 40.0, 256).unwrap();
        let psi = packet(g, &FreeGaussian::new(0.0, 1.0, 2.0));
        let v = Potential::GaussianWell { v0: 1.0, w: 1.0 };
        let run = evolve(&psi, &v, 4.0, 0.01, 50, &EvolveOptions::default()).unwrap();
        assert_eq!(run.frames.len(), 9);
        assert!(run.is_valid());
        assert!(run.log.max_norm_drift() < 1e-10);
        assert!(run.log.max_relative_energy_drift() < 1e-3);
        assert!(run.times().windows(2).all(|w| w[1] > w[0]));
        // a packet running into the wall breaches the boundary monitor
        let fast = packet(g, &FreeGaussian::new(20.0, 1.0, 4.0));
        let run = evolve(&fast, &Potential::Zero, 4.0, 0.01, 50, &EvolveOptions::default()).unwrap();
        assert!(!run.is_valid());
        assert!(evolve(&psi, &v, 4.0, -0.01, 50, &EvolveOptions::default()).is_err());
        assert!(evolve(&psi, &v, 4.0, 0.5, 1, &EvolveOptions::default()).is_err());
    }
}
