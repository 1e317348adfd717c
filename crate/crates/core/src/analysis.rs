//! Ensemble-level checks of the long-time behaviour of Bohmian trajectories:
//! asymptotic velocities and their law, bound/scattering classification,
//! velocity decay, windowed straightness, good momentum sets, probability
//! currents, the slow-ball crossing flux and equivariance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::field::{gradient_with, sample_density, Field, Lattice, Spectrum, Transform};
use crate::stats::{ks_statistic, slope, w1_to_cdf, w1_two_samples, PiecewiseCdf};
use crate::trajectories::{InterpolantBuilder, Status, Trajectory, TrajectoryEnsemble};
use crate::{Error, Point, Potential};

/// `v∞ ≈ Q(T_final)/T_final` and the largest deviation of `Q(t)/t` from it
/// over the last `tail_fraction` of the samples' time span.
pub fn asymptotic_velocity(traj: &Trajectory, tail_fraction: f64) -> Result<(Point, f64), Error> {
    if traj.status != Status::Completed {
        return Err(Error::InvalidArgument(format!(
            "trajectory {} has status {}",
            traj.id,
            traj.status.name()
        )));
    }
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return Err(Error::InvalidArgument("tail fraction must lie in (0, 1)".into()));
    }
    let last = traj
        .final_sample()
        .filter(|s| s.t > 0.0)
        .ok_or_else(|| Error::InvalidArgument("trajectory has no samples at positive time".into()))?;
    let t_final = last.t;
    let v: Point = last.q.map(|x| x / t_final);
    let cutoff = (1.0 - tail_fraction) * t_final;
    let residual = traj
        .samples
        .iter()
        .filter(|s| s.t >= cutoff && s.t > 0.0)
        .map(|s| {
            let d: Point = std::array::from_fn(|a| s.q[a] / s.t - v[a]);
            crate::norm(&d)
        })
        .fold(0.0, f64::max);
    Ok((v, residual))
}

/// Sublinearly growing ball `R(t) = a·T·(t/T)^{1/(1+γ)}` around the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowBall {
    pub a: f64,
    pub t_onset: f64,
    pub gamma: f64,
}

impl SlowBall {
    pub fn new(a: f64, t_onset: f64, gamma: f64) -> Result<Self, Error> {
        if !(a > 0.0 && t_onset > 0.0 && gamma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "slow ball needs a, T, γ > 0 (got {a}, {t_onset}, {gamma})"
            )));
        }
        Ok(Self { a, t_onset, gamma })
    }

    /// Also enforces `γ < 2α` for a bound part of decay class `α`.
    pub fn with_decay_class(a: f64, t_onset: f64, gamma: f64, alpha: f64) -> Result<Self, Error> {
        if !(gamma < 2.0 * alpha) {
            return Err(Error::InvalidArgument(format!(
                "need γ < 2α, got γ = {gamma}, α = {alpha}"
            )));
        }
        Self::new(a, t_onset, gamma)
    }

    pub fn radius(&self, t: f64) -> f64 {
        self.a * self.t_onset * (t / self.t_onset).powf(1.0 / (1.0 + self.gamma))
    }

    /// `dR/dt`.
    pub fn radius_rate(&self, t: f64) -> f64 {
        self.radius(t) / ((1.0 + self.gamma) * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Bound,
    Scattering,
    Undecided,
}

/// Bound when `|Q(t)| ≤ R(t)` for every sample with `t ≥ T`, scattering
/// when `|Q(t)| > a·t` for all of them, undecided otherwise (including
/// trajectories without samples after `T`).
pub fn classify(traj: &Trajectory, ball: &SlowBall, speed_floor: f64) -> Class {
    let late: Vec<_> = traj.samples.iter().filter(|s| s.t >= ball.t_onset).collect();
    if late.is_empty() {
        return Class::Undecided;
    }
    if late.iter().all(|s| crate::norm(&s.q) <= ball.radius(s.t)) {
        Class::Bound
    } else if late.iter().all(|s| crate::norm(&s.q) > speed_floor * s.t) {
        Class::Scattering
    } else {
        Class::Undecided
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub bound: usize,
    pub scattering: usize,
    pub undecided: usize,
}

impl ClassCounts {
    pub fn from_classes(classes: &[Class]) -> Self {
        let mut c = Self::default();
        for k in classes {
            match k {
                Class::Bound => c.bound += 1,
                Class::Scattering => c.scattering += 1,
                Class::Undecided => c.undecided += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.bound + self.scattering + self.undecided
    }
}

/// Per-trajectory verdicts shared by the ensemble checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classified {
    pub class: Vec<Class>,
    /// `None` for trajectories that did not complete.
    pub v_inf: Vec<Option<Point>>,
    pub cauchy_residual: Vec<Option<f64>>,
    pub counts: ClassCounts,
}

pub fn classify_ensemble(
    ens: &TrajectoryEnsemble,
    ball: &SlowBall,
    speed_floor: f64,
    tail_fraction: f64,
) -> Classified {
    let mut class = Vec::with_capacity(ens.len());
    let mut v_inf = Vec::with_capacity(ens.len());
    let mut cauchy = Vec::with_capacity(ens.len());
    for tr in &ens.trajectories {
        match asymptotic_velocity(tr, tail_fraction) {
            Ok((v, r)) => {
                class.push(classify(tr, ball, speed_floor));
                v_inf.push(Some(v));
                cauchy.push(Some(r));
            }
            Err(_) => {
                class.push(Class::Undecided);
                v_inf.push(None);
                cauchy.push(None);
            }
        }
    }
    let counts = ClassCounts::from_classes(&class);
    Classified {
        class,
        v_inf,
        cauchy_residual: cauchy,
        counts,
    }
}

/// Fixed, deterministic projection directions for sliced distances.
pub fn slice_directions(dim: usize, count: usize) -> Vec<Point> {
    match dim {
        1 => vec![[1.0, 0.0, 0.0]],
        2 => (0..count)
            .map(|j| {
                let th = std::f64::consts::PI * j as f64 / count as f64;
                [th.cos(), th.sin(), 0.0]
            })
            .collect(),
        _ => {
            // Fibonacci points on the upper hemisphere (±u give equal W1)
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|j| {
                    let z = 1.0 - (j as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * j as f64;
                    [r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
    }
}

fn project(points: &[Point], u: &Point) -> Vec<f64> {
    points.iter().map(|p| p[0] * u[0] + p[1] * u[1] + p[2] * u[2]).collect()
}

/// Mean over [`slice_directions`] of the 1-D two-sample W1 distance.
pub fn sliced_w1(a: &[Point], b: &[Point], dim: usize, directions: usize) -> f64 {
    let dirs = slice_directions(dim, directions);
    dirs.iter()
        .map(|u| w1_two_samples(&project(a, u), &project(b, u)))
        .sum::<f64>()
        / dirs.len() as f64
}

/// Number of projection directions used in `d ≥ 2`.
pub const SLICES: usize = 32;
/// Reference samples per ensemble member for sliced comparisons.
pub const REFERENCE_FACTOR: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityLawReport {
    pub total: usize,
    pub counts: ClassCounts,
    pub bound_fraction: f64,
    pub undecided_fraction: f64,
    pub pp_weight: f64,
    /// KS distance of each component of the scattering `v∞` sample against
    /// the matching marginal of `|ψ̂^out|²`.
    pub ks_per_axis: Vec<f64>,
    /// 1 % critical value for the scattering sample size.
    pub ks_critical: f64,
    /// Sliced W1 against a large reference sample of `|ψ̂^out|²` (d ≥ 2).
    pub sliced_w1: Option<f64>,
    /// Same statistic between two independent samples of equal size.
    pub sliced_w1_baseline: Option<f64>,
}

impl VelocityLawReport {
    pub fn max_ks(&self) -> f64 {
        self.ks_per_axis.iter().copied().fold(0.0, f64::max)
    }
}

pub fn velocity_law_test(
    classified: &Classified,
    psi_out_hat: &Spectrum,
    pp_weight: f64,
    seed: u64,
) -> Result<VelocityLawReport, Error> {
    let dim = psi_out_hat.grid.dim();
    let total = classified.class.len();
    let samples: Vec<Point> = classified
        .class
        .iter()
        .zip(&classified.v_inf)
        .filter_map(|(c, v)| (*c == Class::Scattering).then_some(*v).flatten())
        .collect();
    let density = psi_out_hat.density();
    let mut ks_per_axis = Vec::new();
    let (mut sliced, mut baseline) = (None, None);
    if !samples.is_empty() && density.mass > 0.0 {
        for axis in 0..dim {
            let cdf = PiecewiseCdf::from_density(&density, axis);
            let xs: Vec<f64> = samples.iter().map(|p| p[axis]).collect();
            ks_per_axis.push(ks_statistic(&xs, |x| cdf.cdf(x)));
        }
        if dim >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let reference = density.sample(REFERENCE_FACTOR * samples.len(), &mut rng)?;
            let a = density.sample(samples.len(), &mut rng)?;
            let b = density.sample(samples.len(), &mut rng)?;
            sliced = Some(sliced_w1(&samples, &reference, dim, SLICES));
            baseline = Some(sliced_w1(&a, &b, dim, SLICES));
        }
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    Ok(VelocityLawReport {
        total,
        counts: classified.counts,
        bound_fraction: frac(classified.counts.bound),
        undecided_fraction: frac(classified.counts.undecided),
        pp_weight,
        ks_per_axis,
        ks_critical: crate::stats::ks_critical_1pct(samples.len().max(1)),
        sliced_w1: sliced,
        sliced_w1_baseline: baseline,
    })
}

/// `T_final/2, T_final/4, …` down to `t_min`, ascending.
pub fn dyadic_ladder(t_final: f64, levels: usize, t_min: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (1..=levels)
        .map(|j| t_final / 2f64.powi(j as i32))
        .filter(|&t| t >= t_min)
        .collect();
    v.reverse();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub ladder: Vec<f64>,
    /// `sup_t t^{1/2}|v(Q_t,t) − v∞|` per scattering trajectory.
    pub constants: Vec<f64>,
    /// Ensemble median of `|v(Q_t,t) − v∞|` at each ladder time.
    pub median_error: Vec<f64>,
    /// Fitted exponent of the median error (`error ∝ t^{−β̂}`).
    pub beta_hat: f64,
    /// Fraction of trajectories whose weighted error stays bounded.
    pub bounded_fraction: f64,
}

/// Weighted error `t^{1/2}|v − v∞|` is called bounded when it is finite and
/// its maximum over the later half of the ladder does not exceed the
/// maximum over the earlier half by more than 10 %.
///
/// The growth check is applied to the error in excess of the trajectory's
/// Cauchy residual: `v∞ = Q(T)/T` is only resolved to that accuracy, and an
/// unresolved offset `c/T` would otherwise make every weighted error grow
/// like `t^{1/2}` at late times.
pub const BOUNDED_GROWTH: f64 = 1.1;

pub fn decay_fit(ens: &TrajectoryEnsemble, classified: &Classified, ladder: &[f64]) -> Result<DecayReport, Error> {
    if ladder.len() < 2 {
        return Err(Error::InvalidArgument(
            "decay fit needs at least two ladder times".into(),
        ));
    }
    let mut errors_by_time: Vec<Vec<f64>> = vec![Vec::new(); ladder.len()];
    let mut constants = Vec::new();
    let mut bounded = 0usize;
    for (i, tr) in ens.trajectories.iter().enumerate() {
        let (Class::Scattering, Some(v_inf)) = (classified.class[i], classified.v_inf[i]) else {
            continue;
        };
        let resolution = classified.cauchy_residual[i].unwrap_or(0.0);
        let mut weighted = Vec::with_capacity(ladder.len());
        let mut excess = Vec::with_capacity(ladder.len());
        for (j, &t) in ladder.iter().enumerate() {
            let Some(s) = tr.at(t) else {
                weighted.push(f64::NAN);
                excess.push(f64::NAN);
                continue;
            };
            let d: Point = std::array::from_fn(|a| s.v[a] - v_inf[a]);
            let e = crate::norm(&d);
            errors_by_time[j].push(e);
            weighted.push(e * t.sqrt());
            excess.push((e - resolution).max(0.0) * t.sqrt());
        }
        let c = weighted.iter().copied().fold(0.0, f64::max);
        let half = excess.len() / 2;
        let head = excess[..half].iter().copied().fold(0.0, f64::max);
        let tail = excess[half..].iter().copied().fold(0.0, f64::max);
        if weighted.iter().all(|w| w.is_finite()) && tail <= BOUNDED_GROWTH * head.max(f64::MIN_POSITIVE) {
            bounded += 1;
        }
        constants.push(if weighted.iter().all(|w| w.is_finite()) {
            c
        } else {
            f64::INFINITY
        });
    }
    let median_error: Vec<f64> = errors_by_time.iter().map(|e| crate::stats::median(e)).collect();
    let (lx, ly): (Vec<f64>, Vec<f64>) = ladder
        .iter()
        .zip(&median_error)
        .filter(|(_, m)| **m > 0.0 && m.is_finite())
        .map(|(t, m)| (t.ln(), m.ln()))
        .unzip();
    let beta_hat = if lx.len() >= 2 { -slope(&lx, &ly) } else { f64::NAN };
    let n = constants.len();
    Ok(DecayReport {
        ladder: ladder.to_vec(),
        constants,
        median_error,
        beta_hat,
        bounded_fraction: if n == 0 { 0.0 } else { bounded as f64 / n as f64 },
    })
}

/// `sup_{T'≥T} sup_{t∈[T',T'+ΔT]} |Q_t − Q_{T'} − v∞(t − T')|` over the
/// sampled times; `None` when no full window fits into the samples.
pub fn straightness_report(traj: &Trajectory, v_inf: &Point, t_onset: f64, window: f64) -> Option<f64> {
    let s = &traj.samples;
    let t_last = s.last()?.t;
    let eps = 1e-9 * (1.0 + t_last.abs());
    let mut worst: Option<f64> = None;
    for (i, start) in s.iter().enumerate() {
        if start.t < t_onset - eps || start.t + window > t_last + eps {
            continue;
        }
        let mut dev = 0.0f64;
        for p in s[i..].iter().take_while(|p| p.t <= start.t + window + eps) {
            let d: Point = std::array::from_fn(|a| p.q[a] - start.q[a] - v_inf[a] * (p.t - start.t));
            dev = dev.max(crate::norm(&d));
        }
        worst = Some(worst.map_or(dev, |w| w.max(dev)));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodSetParams {
    pub delta1: f64,
    pub delta2: f64,
    pub a: f64,
    pub b: f64,
    pub t_onset: f64,
}

impl GoodSetParams {
    pub fn new(delta1: f64, delta2: f64, a: f64, b: f64, t_onset: f64) -> Result<Self, Error> {
        if !(delta1 > 0.0 && delta2 > 0.0 && a > 0.0 && a < b && t_onset > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "good-set parameters need δ1, δ2 > 0 and 0 < a < b (got δ1 = {delta1}, δ2 = {delta2}, a = {a}, b = {b}, T = {t_onset})"
            )));
        }
        Ok(Self {
            delta1,
            delta2,
            a,
            b,
            t_onset,
        })
    }

    /// δ1 = 5 % of the peak, δ2 = one dual-lattice spacing, `a`, `b` the
    /// 10th and 99.9th percentile speeds under `|ψ̂^out|²`.
    pub fn defaults(psi_out_hat: &Spectrum, t_onset: f64) -> Result<Self, Error> {
        let grid = psi_out_hat.grid;
        let mut speeds: Vec<(f64, f64)> = psi_out_hat
            .values
            .iter()
            .enumerate()
            .map(|(i, z)| (crate::norm(&grid.wavevector(i)), z.norm_sqr()))
            .collect();
        speeds.sort_by(|x, y| x.0.total_cmp(&y.0));
        let total: f64 = speeds.iter().map(|s| s.1).sum();
        let percentile = |p: f64| {
            let mut acc = 0.0;
            for (k, w) in &speeds {
                acc += w;
                if acc >= p * total {
                    return *k;
                }
            }
            speeds.last().map_or(0.0, |s| s.0)
        };
        let a = percentile(0.1).max(grid.k_spacing());
        let b = percentile(0.999).max(a + grid.k_spacing());
        Self::new(0.05 * psi_out_hat.max_abs(), grid.k_spacing(), a, b, t_onset)
    }
}

/// Momentum sets `B = {|ψ̂^out| > δ1, a < |k| < b}` and its erosion by δ2.
#[derive(Debug, Clone, PartialEq)]
pub struct GoodSet {
    pub params: GoodSetParams,
    pub lattice: Lattice,
    pub outer: Vec<bool>,
    pub inner: Vec<bool>,
    /// `∫_B |ψ̂^out|²`.
    pub measure: f64,
    /// `∫_{B^{δ2}} |ψ̂^out|²`.
    pub inner_measure: f64,
}

impl GoodSet {
    fn lookup(&self, set: &[bool], k: &Point) -> bool {
        self.lattice.cell_of_point(k).is_some_and(|i| set[i])
    }

    pub fn contains(&self, k: &Point) -> bool {
        self.lookup(&self.outer, k)
    }

    pub fn contains_inner(&self, k: &Point) -> bool {
        self.lookup(&self.inner, k)
    }
}

pub fn good_set(psi_out_hat: &Spectrum, params: &GoodSetParams) -> GoodSet {
    let lattice = psi_out_hat.grid.momentum_lattice();
    let values = psi_out_hat.centered();
    let d = lattice.dim;
    let n = lattice.points;
    let centre = |i: usize| -> Point {
        let ix = lattice.unravel(i);
        std::array::from_fn(|a| if a < d { lattice.center(ix[a]) } else { 0.0 })
    };
    let outer: Vec<bool> = values
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let r = crate::norm(&centre(i));
            z.norm() > params.delta1 && r > params.a && r < params.b
        })
        .collect();
    // erosion: every lattice point within δ2 must also lie in B
    let reach = (params.delta2 / lattice.step + 1e-9).floor() as i64;
    let mut offsets: Vec<[i64; 3]> = Vec::new();
    let range = -reach..=reach;
    for i in range.clone() {
        for j in if d > 1 { range.clone() } else { 0..=0 } {
            for l in if d > 2 { range.clone() } else { 0..=0 } {
                let off = [i, j, l];
                let r2: i64 = off.iter().map(|o| o * o).sum();
                if (r2 as f64).sqrt() * lattice.step <= params.delta2 + 1e-12 {
                    offsets.push(off);
                }
            }
        }
    }
    let inner: Vec<bool> = (0..outer.len())
        .map(|i| {
            if !outer[i] {
                return false;
            }
            let ix = lattice.unravel(i);
            offsets.iter().all(|off| {
                let mut idx = 0usize;
                for a in 0..d {
                    let m = ix[a] as i64 + off[a];
                    if m < 0 || m >= n as i64 {
                        return false;
                    }
                    idx = idx * n + m as usize;
                }
                outer[idx]
            })
        })
        .collect();
    let dv = lattice.cell_volume();
    let measure_of = |set: &[bool]| -> f64 {
        values
            .iter()
            .zip(set)
            .filter(|(_, s)| **s)
            .map(|(z, _)| z.norm_sqr() * dv)
            .sum()
    };
    GoodSet {
        params: *params,
        measure: measure_of(&outer),
        inner_measure: measure_of(&inner),
        lattice,
        outer,
        inner,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoodSetStability {
    /// Trajectories with `Q_T/T ∈ B^{δ2}`.
    pub members: usize,
    /// Members for which some later `Q_t/t` leaves `B`.
    pub violations: usize,
    pub violation_rate: f64,
}

pub fn good_set_stability(ens: &TrajectoryEnsemble, set: &GoodSet) -> GoodSetStability {
    let t_onset = set.params.t_onset;
    let mut members = 0;
    let mut violations = 0;
    for tr in ens.completed() {
        let Some(start) = tr.samples.iter().find(|s| s.t >= t_onset - 1e-9 * (1.0 + t_onset)) else {
            continue;
        };
        if !set.contains_inner(&start.q.map(|x| x / start.t)) {
            continue;
        }
        members += 1;
        if tr
            .samples
            .iter()
            .filter(|s| s.t > start.t)
            .any(|s| !set.contains(&s.q.map(|x| x / s.t)))
        {
            violations += 1;
        }
    }
    GoodSetStability {
        members,
        violations,
        violation_rate: if members == 0 {
            0.0
        } else {
            violations as f64 / members as f64
        },
    }
}

/// Bound, scattering and mixed parts of the current and density of
/// `ψ = ψ_pp + ψ_ac` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentSplit {
    pub j_pp: Vec<Point>,
    pub j_ac: Vec<Point>,
    pub j_mixed: Vec<Point>,
    pub rho_pp: Vec<f64>,
    pub rho_ac: Vec<f64>,
    /// `2 Re(ψ_pp* ψ_ac)`.
    pub rho_mixed: Vec<f64>,
    pub diagnostics: CurrentDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentDiagnostics {
    pub alpha: f64,
    /// `sup_{|q|≥L/2} |j_pp|·|q|^{3+2α}`.
    pub j_pp_weighted: f64,
    /// `sup_{|q|≥L/2} |j_m|·|q|^{1+α}`.
    pub j_mixed_weighted: f64,
    /// `sup_{|q|≥L/2} |M|·|q|^{1+α}`.
    pub rho_mixed_weighted: f64,
}

pub fn current_density(psi_pp: &Field, psi_ac: &Field, alpha: f64) -> Result<CurrentSplit, Error> {
    if psi_pp.grid != psi_ac.grid {
        return Err(Error::InvalidArgument("current parts must share a grid".into()));
    }
    let grid = psi_pp.grid;
    let d = grid.dim();
    let tr = Transform::for_grid(&grid);
    let g_pp = gradient_with(&tr, psi_pp);
    let g_ac = gradient_with(&tr, psi_ac);
    let len = grid.len();
    let mut out = CurrentSplit {
        j_pp: vec![[0.0; 3]; len],
        j_ac: vec![[0.0; 3]; len],
        j_mixed: vec![[0.0; 3]; len],
        rho_pp: vec![0.0; len],
        rho_ac: vec![0.0; len],
        rho_mixed: vec![0.0; len],
        diagnostics: CurrentDiagnostics {
            alpha,
            j_pp_weighted: 0.0,
            j_mixed_weighted: 0.0,
            rho_mixed_weighted: 0.0,
        },
    };
    let half = grid.half_extent() / 2.0;
    for i in 0..len {
        let p = psi_pp.values[i];
        let s = psi_ac.values[i];
        for a in 0..d {
            out.j_pp[i][a] = (p.conj() * g_pp[a].values[i]).im;
            out.j_ac[i][a] = (s.conj() * g_ac[a].values[i]).im;
            out.j_mixed[i][a] = (p.conj() * g_ac[a].values[i] + s.conj() * g_pp[a].values[i]).im;
        }
        out.rho_pp[i] = p.norm_sqr();
        out.rho_ac[i] = s.norm_sqr();
        out.rho_mixed[i] = 2.0 * (p.conj() * s).re;
        let r = crate::norm(&grid.position(i));
        if r >= half {
            let dg = &mut out.diagnostics;
            dg.j_pp_weighted = dg
                .j_pp_weighted
                .max(crate::norm(&out.j_pp[i]) * r.powf(3.0 + 2.0 * alpha));
            dg.j_mixed_weighted = dg
                .j_mixed_weighted
                .max(crate::norm(&out.j_mixed[i]) * r.powf(1.0 + alpha));
            dg.rho_mixed_weighted = dg.rho_mixed_weighted.max(out.rho_mixed[i].abs() * r.powf(1.0 + alpha));
        }
    }
    Ok(out)
}

/// Quadrature of the unit sphere in `d` dimensions: directions and weights
/// summing to the sphere's surface measure.
pub fn sphere_rule(dim: usize) -> Vec<(Point, f64)> {
    use std::f64::consts::PI;
    match dim {
        1 => vec![([1.0, 0.0, 0.0], 1.0), ([-1.0, 0.0, 0.0], 1.0)],
        2 => {
            let m = 64;
            (0..m)
                .map(|j| {
                    let th = 2.0 * PI * j as f64 / m as f64;
                    ([th.cos(), th.sin(), 0.0], 2.0 * PI / m as f64)
                })
                .collect()
        }
        _ => {
            // Gauss–Legendre in cos θ × uniform in φ
            let (nodes, weights) = gauss_legendre(16);
            let m = 32;
            let mut out = Vec::with_capacity(nodes.len() * m);
            for (z, w) in nodes.iter().zip(&weights) {
                let r = (1.0 - z * z).sqrt();
                for j in 0..m {
                    let phi = 2.0 * PI * j as f64 / m as f64;
                    out.push(([r * phi.cos(), r * phi.sin(), *z], w * 2.0 * PI / m as f64));
                }
            }
            out
        }
    }
}

/// Gauss–Legendre nodes and weights on [−1, 1] by Newton iteration.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// Flux integrand across the moving slow-ball sphere, one value per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingFlux {
    pub ball: SlowBall,
    pub times: Vec<f64>,
    /// `∫_{S_R(t)} |j·ê_r − |ψ|² Ṙ| R^{d−1} dΩ` at each frame time.
    pub integrand: Vec<f64>,
}

impl CrossingFlux {
    /// Trapezoid rule over the frame times.
    pub fn p_gamma(&self) -> f64 {
        trapezoid(&self.times, &self.integrand)
    }

    /// The same quadrature on every `k`-th frame (keeping the last).
    pub fn p_gamma_thinned(&self, k: usize) -> f64 {
        let last = self.times.len().saturating_sub(1);
        let (t, f): (Vec<f64>, Vec<f64>) = self
            .times
            .iter()
            .zip(&self.integrand)
            .enumerate()
            .filter(|(i, _)| i % k == 0 || *i == last)
            .map(|(_, (t, f))| (*t, *f))
            .unzip();
        trapezoid(&t, &f)
    }
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2)
        .zip(f.windows(2))
        .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
        .sum()
}

/// Evaluates the crossing-flux integrand on every frame with `t ≥ T`.
pub fn crossing_flux<I>(frames: I, ball: &SlowBall, oversample: usize) -> Result<CrossingFlux, Error>
where
    I: IntoIterator<Item = Result<Field, Error>>,
{
    let mut builder: Option<InterpolantBuilder> = None;
    let mut times = Vec::new();
    let mut integrand = Vec::new();
    let eps = 1e-9 * (1.0 + ball.t_onset);
    for frame in frames {
        let frame = frame?;
        if frame.time < ball.t_onset - eps {
            continue;
        }
        let b = match &builder {
            Some(b) => b,
            None => builder.insert(InterpolantBuilder::new(frame.grid, &Potential::Zero, oversample)?),
        };
        let interp = b.build(&frame)?;
        let d = frame.grid.dim();
        let t = frame.time;
        let r = ball.radius(t);
        let rate = ball.radius_rate(t);
        let mut acc = 0.0;
        for (dir, w) in sphere_rule(d) {
            let q: Point = dir.map(|x| x * r);
            let (psi, grad) = interp.eval(&q);
            let jr: f64 = (0..d).map(|a| (psi.conj() * grad[a]).im * dir[a]).sum();
            acc += w * (jr - psi.norm_sqr() * rate).abs();
        }
        times.push(t);
        integrand.push(acc * r.powi(d as i32 - 1));
    }
    Ok(CrossingFlux {
        ball: *ball,
        times,
        integrand,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub ensemble_size: usize,
    /// Trajectories with `|Q_T| ≤ R(T)`.
    pub inside_at_onset: usize,
    /// Of those, the ones with `|Q_t| > R(t)` at some later sample.
    pub escaped: usize,
    /// `escaped / ensemble_size`.
    pub fraction: f64,
}

pub fn escape_fraction(ens: &TrajectoryEnsemble, ball: &SlowBall) -> EscapeReport {
    let eps = 1e-9 * (1.0 + ball.t_onset);
    let mut inside = 0;
    let mut escaped = 0;
    for tr in &ens.trajectories {
        let Some(start) = tr.samples.iter().find(|s| s.t >= ball.t_onset - eps) else {
            continue;
        };
        if crate::norm(&start.q) > ball.radius(start.t.max(ball.t_onset)) {
            continue;
        }
        inside += 1;
        if tr
            .samples
            .iter()
            .filter(|s| s.t > start.t)
            .any(|s| crate::norm(&s.q) > ball.radius(s.t))
        {
            escaped += 1;
        }
    }
    let n = ens.len();
    EscapeReport {
        ensemble_size: n,
        inside_at_onset: inside,
        escaped,
        fraction: if n == 0 { 0.0 } else { escaped as f64 / n as f64 },
    }
}

/// Three-sigma binomial margin `3√(p(1−p)/N)`.
pub fn binomial_margin(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = p.clamp(0.0, 1.0);
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub time: f64,
    pub samples: usize,
    /// W1 (sliced in d ≥ 2) between the ensemble and `|ψ_t|²`.
    pub distance: f64,
    /// Mean of the same statistic for fresh `N`-point samples of `|ψ_t|²`.
    pub baseline: f64,
}

impl EquivarianceReport {
    pub fn ratio(&self) -> f64 {
        self.distance / self.baseline
    }
}

/// Compares the ensemble positions at `psi_t.time` with `|ψ_t|²`.
pub fn equivariance_test(ens: &TrajectoryEnsemble, psi_t: &Field, seed: u64) -> Result<EquivarianceReport, Error> {
    let t = psi_t.time;
    let positions: Vec<Point> = ens.trajectories.iter().filter_map(|tr| tr.at(t).map(|s| s.q)).collect();
    equivariance_of_points(&positions, psi_t, seed)
}

/// Independent draws averaged into the sampling baseline.
pub const BASELINE_DRAWS: u64 = 16;

pub fn equivariance_of_points(positions: &[Point], psi_t: &Field, seed: u64) -> Result<EquivarianceReport, Error> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::InvalidArgument(format!(
            "no ensemble samples at t = {}",
            psi_t.time
        )));
    }
    let dim = psi_t.grid.dim();
    let draw = |k: u64| sample_density(psi_t, n, seed.wrapping_add(k.wrapping_mul(0x9e37_79b9)));
    let mut baseline = 0.0;
    let distance = if dim == 1 {
        let cdf = PiecewiseCdf::from_density(&psi_t.density(), 0);
        let w1 = |pts: &[Point]| w1_to_cdf(&pts.iter().map(|p| p[0]).collect::<Vec<_>>(), &cdf);
        for k in 1..=BASELINE_DRAWS {
            baseline += w1(&draw(k)?);
        }
        w1(positions)
    } else {
        let reference = sample_density(psi_t, REFERENCE_FACTOR * n, seed.wrapping_add(0x7f4a_7c15))?;
        for k in 1..=BASELINE_DRAWS {
            baseline += sliced_w1(&draw(k)?, &reference, dim, SLICES);
        }
        sliced_w1(positions, &reference, dim, SLICES)
    };
    Ok(EquivarianceReport {
        time: psi_t.time,
        samples: n,
        distance,
        baseline: baseline / BASELINE_DRAWS as f64,
    })
}

/// Largest `|Q(t)|/t` over the samples after `t_from`, per window of the
/// tail; used to check that bound trajectories grow sublinearly.
pub fn sublinear_trend(traj: &Trajectory, t_from: f64) -> Option<(f64, f64)> {
    let tail: Vec<_> = traj.samples.iter().filter(|s| s.t >= t_from && s.t > 0.0).collect();
    if tail.len() < 2 {
        return None;
    }
    let mid = tail.len() / 2;
    let ratio = |s: &&crate::trajectories::Sample| crate::norm(&s.q) / s.t;
    let early = tail[..mid].iter().map(ratio).fold(0.0, f64::max);
    let late = tail[mid..].iter().map(ratio).fold(0.0, f64::max);
    Some((early, late))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimEntry {
    pub id: String,
    pub description: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// One entry per enabled claim plus fitted constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub scenario: String,
    pub claims: Vec<ClaimEntry>,
    pub constants: BTreeMap<String, f64>,
}

impl VerificationReport {
    pub fn new(scenario: impl Into<String>) -> Self {
        Self {
            scenario: scenario.into(),
            ..Default::default()
        }
    }

    /// Records a claim that passes when `statistic ≤ threshold`.
    pub fn at_most(&mut self, id: &str, description: &str, statistic: f64, threshold: f64) {
        self.push(id, description, statistic, threshold, statistic <= threshold);
    }

    /// Records a claim that passes when `statistic ≥ threshold`.
    pub fn at_least(&mut self, id: &str, description: &str, statistic: f64, threshold: f64) {
        self.push(id, description, statistic, threshold, statistic >= threshold);
    }

    pub fn push(&mut self, id: &str, description: &str, statistic: f64, threshold: f64, pass: bool) {
        self.claims.retain(|c| c.id != id);
        self.claims.push(ClaimEntry {
            id: id.into(),
            description: description.into(),
            statistic,
            threshold,
            pass,
        });
    }

    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.insert(name.into(), value);
    }

    pub fn all_pass(&self) -> bool {
        self.claims.iter().all(|c| c.pass)
    }

    pub fn claim(&self, id: &str) -> Option<&ClaimEntry> {
        self.claims.iter().find(|c| c.id == id)
    }
}
