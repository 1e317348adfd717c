//! Bound states of `H` and the split `ψ = ψ_pp + ψ_ac`.
//!
//! Levels are found one at a time: imaginary-time relaxation (Strang
//! split, deflated against already locked levels) brings a start vector
//! close to the lowest remaining eigenvector, then a locally optimal
//! preconditioned iteration polishes it until `‖Hu − Eu‖ < tol`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{gradient_with, inner, Field, Grid, Label, Transform};
use crate::{Error, Potential};

/// Levels with `|E|` below this are treated as threshold/continuum.
pub const ZERO_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct EigenPair {
    pub energy: f64,
    /// Normalised eigenvector, labelled [`Label::Eigenstate`].
    pub state: Field,
    /// `‖Hu − Eu‖`.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundStateOptions {
    pub max_count: usize,
    pub tol: f64,
    pub margin: f64,
    pub imaginary_dt: f64,
    pub imaginary_time_max: f64,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for BoundStateOptions {
    fn default() -> Self {
        Self {
            max_count: 8,
            tol: 1e-7,
            margin: ZERO_MARGIN,
            imaginary_dt: 0.05,
            imaginary_time_max: 40.0,
            refine_iterations: 800,
            seed: 0x5eed,
        }
    }
}

/// Result of a bound-state search.
#[derive(Debug, Clone)]
pub struct BoundStates {
    /// Sorted ascending in energy.
    pub levels: Vec<EigenPair>,
    /// Energy of the first level that failed `E < −margin` (the search
    /// stops there), if the search got that far.
    pub threshold_energy: Option<f64>,
    /// Fraction of that level's mass in the inner half of the box.
    pub threshold_localization: Option<f64>,
    /// Raised when the threshold level looks localised: a proxy for a
    /// zero-energy eigenvalue or resonance.
    pub near_zero_flag: bool,
}

/// Matrix-free `H = −Δ/2 + V` on a grid, acting on plain node arrays.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    grid: Grid,
    transform: Transform,
    potential: Vec<f64>,
    k_squared: Vec<f64>,
}

impl Hamiltonian {
    pub fn new(grid: Grid, potential: &Potential) -> Self {
        Self {
            grid,
            transform: Transform::for_grid(&grid),
            potential: potential.on_grid(&grid),
            k_squared: grid.k_squared(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut spec = x.to_vec();
        self.transform.forward(&mut spec);
        spec.iter_mut().zip(&self.k_squared).for_each(|(z, k2)| *z *= 0.5 * k2);
        self.transform.inverse(&mut spec);
        spec.iter_mut()
            .zip(x.iter().zip(&self.potential))
            .for_each(|(h, (x, v))| *h += v * x);
        spec
    }

    /// `(k²/2 + shift)^{-1}` applied spectrally.
    fn precondition(&self, r: &[Complex64], shift: f64) -> Vec<Complex64> {
        let mut spec = r.to_vec();
        self.transform.forward(&mut spec);
        spec.iter_mut()
            .zip(&self.k_squared)
            .for_each(|(z, k2)| *z /= 0.5 * k2 + shift);
        self.transform.inverse(&mut spec);
        spec
    }

    fn imaginary_step(&self, x: &mut [Complex64], half_v: &[f64], kinetic: &[f64]) {
        x.iter_mut().zip(half_v).for_each(|(z, f)| *z *= f);
        self.transform.forward(x);
        x.iter_mut().zip(kinetic).for_each(|(z, f)| *z *= f);
        self.transform.inverse(x);
        x.iter_mut().zip(half_v).for_each(|(z, f)| *z *= f);
    }
}

fn l2(x: &[Complex64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn scale(x: &mut [Complex64], s: f64) {
    x.iter_mut().for_each(|z| *z *= s);
}

fn axpy(y: &mut [Complex64], a: Complex64, x: &[Complex64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

/// Removes components along the (ℓ²-orthonormal) `locked` vectors.
fn deflate(x: &mut [Complex64], locked: &[Vec<Complex64>]) {
    for _ in 0..2 {
        for u in locked {
            let c = inner(u, x);
            axpy(x, -c, u);
        }
    }
}

fn rayleigh(x: &[Complex64], hx: &[Complex64]) -> f64 {
    inner(x, hx).re / inner(x, x).re
}

fn start_vector(grid: &Grid, seed: u64, level: usize) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (level as u64).wrapping_mul(0x9e37_79b9));
    let s = grid.half_extent() / 4.0;
    (0..grid.len())
        .map(|i| {
            let p = grid.position(i);
            let r2: f64 = p.iter().map(|x| x * x).sum();
            let env = (-r2 / (2.0 * s * s)).exp();
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * env
        })
        .collect()
}

struct Refined {
    x: Vec<Complex64>,
    energy: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Locally optimal preconditioned iteration on span{x, P r, p}.
fn refine(h: &Hamiltonian, mut x: Vec<Complex64>, locked: &[Vec<Complex64>], tol: f64, max_iter: usize) -> Refined {
    deflate(&mut x, locked);
    let nx = l2(&x);
    scale(&mut x, 1.0 / nx);
    let mut hx = h.apply(&x);
    let mut theta = rayleigh(&x, &hx);
    let mut p: Option<(Vec<Complex64>, Vec<Complex64>)> = None;
    let mut residual = f64::INFINITY;
    for it in 0..=max_iter {
        let mut r: Vec<Complex64> = hx.iter().zip(&x).map(|(h, x)| h - theta * x).collect();
        deflate(&mut r, locked);
        residual = l2(&r);
        if residual < tol {
            return Refined {
                x,
                energy: theta,
                residual,
                iterations: it,
                converged: true,
            };
        }
        if it == max_iter {
            break;
        }
        let mut w = h.precondition(&r, (-theta).max(0.05));
        deflate(&mut w, locked);
        let mut basis = vec![x.clone()];
        let mut hbasis = vec![hx.clone()];
        let mut candidates = vec![(w, None)];
        if let Some((pv, hp)) = p.take() {
            candidates.push((pv, Some(hp)));
        }
        for (mut v, hv) in candidates {
            let before = l2(&v);
            let mut hv = hv;
            for _ in 0..2 {
                for (b, hb) in basis.iter().zip(&hbasis) {
                    let c = inner(b, &v);
                    axpy(&mut v, -c, b);
                    if let Some(hv) = hv.as_mut() {
                        axpy(hv, -c, hb);
                    }
                }
            }
            let after = l2(&v);
            if !(after > 1e-10 * before.max(1e-300)) || after == 0.0 {
                continue;
            }
            scale(&mut v, 1.0 / after);
            let hv = match hv {
                Some(mut hv) => {
                    scale(&mut hv, 1.0 / after);
                    hv
                }
                None => h.apply(&v),
            };
            basis.push(v);
            hbasis.push(hv);
        }
        let m = basis.len();
        let mut proj = DMatrix::<Complex64>::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                proj[(i, j)] = inner(&basis[i], &hbasis[j]);
            }
        }
        // symmetrise against round-off
        let proj = (&proj + proj.adjoint()) * Complex64::new(0.5, 0.0);
        let eig = proj.symmetric_eigen();
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let y = eig.eigenvectors.column(imin);
        let mut xn = vec![Complex64::default(); x.len()];
        let mut hxn = vec![Complex64::default(); x.len()];
        let mut pn = vec![Complex64::default(); x.len()];
        let mut hpn = vec![Complex64::default(); x.len()];
        for i in 0..m {
            axpy(&mut xn, y[i], &basis[i]);
            axpy(&mut hxn, y[i], &hbasis[i]);
            if i > 0 {
                axpy(&mut pn, y[i], &basis[i]);
                axpy(&mut hpn, y[i], &hbasis[i]);
            }
        }
        let nx = l2(&xn);
        scale(&mut xn, 1.0 / nx);
        scale(&mut hxn, 1.0 / nx);
        x = xn;
        hx = hxn;
        theta = rayleigh(&x, &hx);
        if l2(&pn) > 0.0 {
            p = Some((pn, hpn));
        }
    }
    Refined {
        x,
        energy: theta,
        residual,
        iterations: max_iter,
        converged: false,
    }
}

fn relax(
    h: &Hamiltonian,
    mut x: Vec<Complex64>,
    locked: &[Vec<Complex64>],
    options: &BoundStateOptions,
) -> Vec<Complex64> {
    let dtau = options.imaginary_dt;
    let half_v: Vec<f64> = h.potential.iter().map(|v| (-0.5 * v * dtau).exp()).collect();
    let kinetic: Vec<f64> = h.k_squared.iter().map(|k2| (-0.5 * k2 * dtau).exp()).collect();
    let steps = (options.imaginary_time_max / dtau).ceil() as usize;
    let mut last = f64::INFINITY;
    for step in 0..steps {
        h.imaginary_step(&mut x, &half_v, &kinetic);
        deflate(&mut x, locked);
        let n = l2(&x);
        scale(&mut x, 1.0 / n);
        if step % 20 == 19 {
            let e = rayleigh(&x, &h.apply(&x));
            if (last - e).abs() < 1e-6 * dtau * 20.0 {
                break;
            }
            last = e;
        }
    }
    x
}

fn to_field(grid: Grid, x: &[Complex64]) -> Field {
    let s = grid.cell_volume().powf(-0.5);
    Field {
        grid,
        values: x.iter().map(|z| z * s).collect(),
        time: 0.0,
        label: Label::Eigenstate,
    }
}

fn inner_half_mass(grid: &Grid, x: &[Complex64]) -> f64 {
    let half = grid.half_extent() / 2.0;
    let total: f64 = x.iter().map(|z| z.norm_sqr()).sum();
    let inside: f64 = x
        .iter()
        .enumerate()
        .filter(|(i, _)| grid.position(*i)[..grid.dim()].iter().all(|q| q.abs() < half))
        .map(|(_, z)| z.norm_sqr())
        .sum();
    inside / total
}

/// All bound levels below `−margin` (up to `max_count`) with default options.
pub fn bound_states(potential: &Potential, grid: &Grid, max_count: usize, tol: f64) -> Result<BoundStates, Error> {
    bound_states_with(
        potential,
        grid,
        &BoundStateOptions {
            max_count,
            tol,
            ..Default::default()
        },
    )
}

pub fn bound_states_with(
    potential: &Potential,
    grid: &Grid,
    options: &BoundStateOptions,
) -> Result<BoundStates, Error> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let h = Hamiltonian::new(*grid, potential);
    let mut out = BoundStates {
        levels: Vec::new(),
        threshold_energy: None,
        threshold_localization: None,
        near_zero_flag: false,
    };
    if matches!(potential, Potential::Zero) {
        return Ok(out);
    }
    let mut locked: Vec<Vec<Complex64>> = Vec::new();
    for level in 0..options.max_count {
        let start = start_vector(grid, options.seed, level);
        let relaxed = relax(&h, start, &locked, options);
        let r = refine(&h, relaxed, &locked, options.tol, options.refine_iterations);
        if r.energy >= -options.margin {
            let loc = inner_half_mass(grid, &r.x);
            out.threshold_energy = Some(r.energy);
            out.threshold_localization = Some(loc);
            out.near_zero_flag = loc > 0.5f64.powi(grid.dim() as i32) + 0.25;
            break;
        }
        if !r.converged {
            return Err(Error::NonConvergence {
                level,
                residual: r.residual,
                iterations: r.iterations,
            });
        }
        out.levels.push(EigenPair {
            energy: r.energy,
            state: to_field(*grid, &r.x),
            residual: r.residual,
        });
        locked.push(r.x);
    }
    out.levels.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    Ok(out)
}

/// Searches on a central sub-box of half-width `search_extent` (same
/// spacing), then embeds each level into `grid` and re-polishes it there.
/// Exponentially localised levels lose nothing; the search is much cheaper
/// on large boxes.
pub fn bound_states_embedded(
    potential: &Potential,
    grid: &Grid,
    search_extent: f64,
    options: &BoundStateOptions,
) -> Result<BoundStates, Error> {
    let sub = grid.central_subgrid(search_extent);
    if sub.points() >= grid.points() {
        return bound_states_with(potential, grid, options);
    }
    let found = bound_states_with(potential, &sub, options)?;
    let h = Hamiltonian::new(*grid, potential);
    let cell = grid.cell_volume().sqrt();
    let mut locked: Vec<Vec<Complex64>> = Vec::new();
    let mut levels = Vec::new();
    for (level, pair) in found.levels.iter().enumerate() {
        let embedded = embed(&pair.state, grid);
        let x: Vec<Complex64> = embedded.values.iter().map(|z| z * cell).collect();
        let r = refine(&h, x, &locked, options.tol, options.refine_iterations);
        if !r.converged {
            return Err(Error::NonConvergence {
                level,
                residual: r.residual,
                iterations: r.iterations,
            });
        }
        levels.push(EigenPair {
            energy: r.energy,
            state: to_field(*grid, &r.x),
            residual: r.residual,
        });
        locked.push(r.x);
    }
    Ok(BoundStates { levels, ..found })
}

/// Copies a field on a central sub-grid into `grid`, zero elsewhere.
pub fn embed(field: &Field, grid: &Grid) -> Field {
    let sub = field.grid;
    let off = (grid.points() - sub.points()) / 2;
    let mut out = Field::zeros(*grid, field.time, field.label);
    for (i, z) in field.values.iter().enumerate() {
        let si = sub.unravel(i);
        let mut gi = [0; 3];
        for a in 0..grid.dim() {
            gi[a] = si[a] + off;
        }
        out.values[grid.ravel(gi)] = *z;
    }
    out
}

/// `ψ₀ = ψ_pp + ψ_ac` relative to a set of orthonormal eigenpairs.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenpairs: Vec<EigenPair>,
    /// `c_j = ⟨u_j, ψ₀⟩`.
    pub coefficients: Vec<Complex64>,
    pub psi_pp0: Field,
    pub psi_ac0: Field,
    pub pp_weight: f64,
    pub ac_weight: f64,
}

impl SpectralDecomposition {
    /// `ψ_pp,t = Σ c_j e^{−iE_j t} u_j`, exact for the discrete `H`.
    pub fn pp_at(&self, t: f64) -> Field {
        let grid = self.psi_pp0.grid;
        let mut out = Field::zeros(grid, t, Label::Bound);
        for (pair, c) in self.eigenpairs.iter().zip(&self.coefficients) {
            let a = c * Complex64::from_polar(1.0, -pair.energy * t);
            axpy(&mut out.values, a, &pair.state.values);
        }
        out
    }
}

pub fn split(psi0: &Field, eigenpairs: &[EigenPair]) -> SpectralDecomposition {
    let mut pp = Field::zeros(psi0.grid, psi0.time, Label::Bound);
    let coefficients: Vec<Complex64> = eigenpairs
        .iter()
        .map(|pair| {
            let c = pair.state.inner(psi0);
            axpy(&mut pp.values, c, &pair.state.values);
            c
        })
        .collect();
    let ac = psi0.sub(&pp).with_label(Label::Scattering);
    SpectralDecomposition {
        eigenpairs: eigenpairs.to_vec(),
        coefficients,
        pp_weight: pp.norm_sqr(),
        ac_weight: ac.norm_sqr(),
        psi_pp0: pp,
        psi_ac0: ac,
    }
}

/// Empirical check of `sup_t |ψ_pp(q)| ≤ C|q|^{−3/2−α}` over a finite set of
/// frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayClassReport {
    pub alpha: f64,
    pub frames_checked: usize,
    /// `sup_t sup_{|q| ≥ L/2} |ψ_pp|·|q|^{3/2+α}`.
    pub bound: f64,
    /// Same with `|∇ψ_pp|`.
    pub gradient_bound: f64,
    /// Ratio of the weighted sup over `|q| ≥ 3L/4` to the one over
    /// `L/2 ≤ |q| < 3L/4`; above one means the weighted field still grows.
    pub tail_trend: f64,
    pub finite: bool,
}

pub fn check_decay_class(frames_of_pp: &[Field], alpha: f64) -> Result<DecayClassReport, Error> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut bound = 0.0f64;
    let mut grad_bound = 0.0f64;
    let mut inner_sup = 0.0f64;
    let mut outer_sup = 0.0f64;
    let power = 1.5 + alpha;
    for frame in frames_of_pp {
        let grid = frame.grid;
        let l = grid.half_extent();
        let floor = 1e-12 * frame.max_abs();
        let grad = gradient_with(&Transform::for_grid(&grid), frame);
        for (i, z) in frame.values.iter().enumerate() {
            let p = grid.position(i);
            let r = crate::norm(&p);
            if r < l / 2.0 || r > l {
                continue;
            }
            let w = r.powf(power);
            let amp = if z.norm() > floor { z.norm() } else { 0.0 };
            let g: f64 = grad.iter().map(|c| c.values[i].norm_sqr()).sum::<f64>().sqrt();
            let g = if g > floor { g } else { 0.0 };
            bound = bound.max(amp * w);
            grad_bound = grad_bound.max(g * w);
            if r < 0.75 * l {
                inner_sup = inner_sup.max(amp * w);
            } else {
                outer_sup = outer_sup.max(amp * w);
            }
        }
    }
    let tail_trend = if outer_sup == 0.0 { 0.0 } else { outer_sup / inner_sup };
    Ok(DecayClassReport {
        alpha,
        frames_checked: frames_of_pp.len(),
        bound,
        gradient_bound: grad_bound,
        tail_trend,
        finite: bound.is_finite() && tail_trend <= 1.0,
    })
}
