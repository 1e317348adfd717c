//! Bohmian velocity field `v = Im(∇ψ/ψ)` over stored frames and adaptive
//! integration of trajectory ensembles.
//!
//! Each frame is turned into periodic cubic B-spline interpolants of `ψ`,
//! `∇ψ`, `∂ₜψ = −iHψ` and `∂ₜ∇ψ`, all computed spectrally at the nodes
//! (optionally on a trigonometrically refined lattice). Between frames the
//! fields are blended with cubic Hermite polynomials in time. Ensembles are
//! advanced slab by slab, so only two frames are ever interpolated at once.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{derivative_wavenumbers, sample_density, Field, Grid, Transform};
use crate::{Error, Point, Potential};

/// `ε_node` relative to the largest node amplitude of the frames involved.
pub const NODE_EPS: f64 = 1e-8;
/// Trajectories entering this outer shell of the box stop with `LeftBox`.
pub const LEFT_BOX_SHELL: f64 = 0.05;

/// Default spatial refinement before spline fitting.
pub fn default_oversample(dim: usize) -> usize {
    match dim {
        1 => 4,
        2 => 2,
        _ => 1,
    }
}

/// Spline interpolants of one frame.
#[derive(Debug, Clone)]
pub struct FrameInterpolant {
    pub time: f64,
    dim: usize,
    half_extent: f64,
    points: usize,
    step: f64,
    /// Number of interleaved fields: ψ, ∇ψ, ∂ₜψ, ∂ₜ∇ψ.
    fields: usize,
    coeffs: Vec<Complex64>,
    max_abs: f64,
}

/// Reusable transforms and symbols for building [`FrameInterpolant`]s on
/// one grid.
pub struct InterpolantBuilder {
    grid: Grid,
    fine: Grid,
    oversample: usize,
    coarse_transform: Transform,
    fine_transform: Transform,
    potential: Vec<f64>,
    kinetic: Vec<f64>,
    deriv_k: Vec<f64>,
    /// Inverse of the B-spline symbol on the fine lattice.
    inverse_symbol: Vec<f64>,
    /// Coarse slot → fine slots with weights (Nyquist split evenly).
    slot_map: Vec<Vec<(usize, f64)>>,
}

impl InterpolantBuilder {
    pub fn new(grid: Grid, potential: &Potential, oversample: usize) -> Result<Self, Error> {
        if oversample == 0 {
            return Err(Error::InvalidArgument("oversample must be positive".into()));
        }
        let n = grid.points();
        let nf = n * oversample;
        let fine = Grid::new(grid.dim(), grid.half_extent(), nf)?;
        let kinetic = grid.k_squared().into_iter().map(|k2| 0.5 * k2).collect();
        let axis_symbol: Vec<f64> = (0..nf)
            .map(|m| {
                let theta = 2.0 * std::f64::consts::PI * fine.signed_mode(m) as f64 / nf as f64;
                (4.0 + 2.0 * theta.cos()) / 6.0
            })
            .collect();
        let inverse_symbol = (0..fine.len())
            .map(|i| {
                let ix = fine.unravel(i);
                1.0 / ix[..grid.dim()].iter().map(|&m| axis_symbol[m]).product::<f64>()
            })
            .collect();
        let slot_map = (0..n)
            .map(|m| {
                let s = grid.signed_mode(m);
                if 2 * s.unsigned_abs() as usize == n && oversample > 1 {
                    vec![(nf - n / 2, 0.5), (n / 2, 0.5)]
                } else {
                    vec![(s.rem_euclid(nf as i64) as usize, 1.0)]
                }
            })
            .collect();
        Ok(Self {
            grid,
            fine,
            oversample,
            coarse_transform: Transform::for_grid(&grid),
            fine_transform: Transform::for_grid(&fine),
            potential: potential.on_grid(&grid),
            kinetic,
            deriv_k: derivative_wavenumbers(&grid),
            inverse_symbol,
            slot_map,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn build(&self, psi: &Field) -> Result<FrameInterpolant, Error> {
        if psi.grid != self.grid {
            return Err(Error::InvalidArgument(
                "frame grid differs from interpolant grid".into(),
            ));
        }
        let d = self.grid.dim();
        let fields = 2 * (1 + d);
        let mut spec = psi.values.clone();
        self.coarse_transform.forward(&mut spec);
        // ∂ₜψ = −i(T + V)ψ
        let mut kin: Vec<Complex64> = spec.iter().zip(&self.kinetic).map(|(z, k)| z * k).collect();
        self.coarse_transform.inverse(&mut kin);
        let mut dot: Vec<Complex64> = kin
            .iter()
            .zip(&psi.values)
            .zip(&self.potential)
            .map(|((t, p), v)| Complex64::new(0.0, -1.0) * (t + p * v))
            .collect();
        self.coarse_transform.forward(&mut dot);

        let nf_len = self.fine.len();
        let mut coeffs = vec![Complex64::default(); nf_len * fields];
        let mut slot = 0;
        for base in [&spec, &dot] {
            for derivative in 0..=d {
                let mut fine = self.refine(base, derivative);
                for (z, s) in fine.iter_mut().zip(&self.inverse_symbol) {
                    *z *= *s;
                }
                self.fine_transform.inverse(&mut fine);
                for (i, z) in fine.into_iter().enumerate() {
                    coeffs[i * fields + slot] = z;
                }
                slot += 1;
            }
        }
        Ok(FrameInterpolant {
            time: psi.time,
            dim: d,
            half_extent: self.grid.half_extent(),
            points: self.fine.points(),
            step: self.fine.spacing(),
            fields,
            coeffs,
            max_abs: psi.max_abs(),
        })
    }

    /// Zero-padded spectrum on the fine lattice, scaled so that the fine
    /// inverse transform reproduces node values; `derivative = a + 1`
    /// multiplies by `i·k_a` first.
    fn refine(&self, spec: &[Complex64], derivative: usize) -> Vec<Complex64> {
        let d = self.grid.dim();
        let nf = self.fine.points();
        let scale = (self.oversample as f64).powi(d as i32);
        let mut out = vec![Complex64::default(); self.fine.len()];
        for (i, z) in spec.iter().enumerate() {
            let ix = self.grid.unravel(i);
            let mut value = z * scale;
            if derivative > 0 {
                value *= Complex64::new(0.0, self.deriv_k[ix[derivative - 1]]);
            }
            if value == Complex64::default() {
                continue;
            }
            // Cartesian product of the per-axis slot lists
            let maps: Vec<&Vec<(usize, f64)>> = (0..d).map(|a| &self.slot_map[ix[a]]).collect();
            let mut counters = [0usize; 3];
            'product: loop {
                let mut idx = 0;
                let mut w = 1.0;
                for a in 0..d {
                    let (s, wa) = maps[a][counters[a]];
                    idx = idx * nf + s;
                    w *= wa;
                }
                out[idx] += value * w;
                let mut a = d;
                loop {
                    if a == 0 {
                        break 'product;
                    }
                    a -= 1;
                    counters[a] += 1;
                    if counters[a] < maps[a].len() {
                        continue 'product;
                    }
                    counters[a] = 0;
                }
            }
        }
        out
    }
}

/// Cubic B-spline weights for the coefficients at offsets −1, 0, 1, 2.
fn bspline_weights(f: f64) -> [f64; 4] {
    let g = 1.0 - f;
    let f2 = f * f;
    let f3 = f2 * f;
    [
        g * g * g / 6.0,
        (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
        (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
        f3 / 6.0,
    ]
}

/// Spline stencil for one point, shared by every frame on the same lattice.
struct Stencil {
    base: [usize; 3],
    weights: [[f64; 4]; 3],
}

impl FrameInterpolant {
    fn stencil(&self, q: &Point) -> Stencil {
        let mut base = [0; 3];
        let mut weights = [[0.0; 4]; 3];
        let n = self.points as i64;
        for a in 0..self.dim {
            let u = (q[a] + self.half_extent) / self.step;
            let i = u.floor();
            weights[a] = bspline_weights(u - i);
            base[a] = (i as i64 - 1).rem_euclid(n) as usize;
        }
        Stencil { base, weights }
    }

    /// Adds `scale ×` the interpolated field vector to `out`.
    fn accumulate(&self, st: &Stencil, scale: [f64; 2], out: &mut [Complex64; 8]) {
        let n = self.points;
        let f = self.fields;
        let half = f / 2;
        let wrap = |b: usize, o: usize| {
            let j = b + o;
            if j >= n {
                j - n
            } else {
                j
            }
        };
        let mut add = |node: usize, w: f64| {
            let c = &self.coeffs[node * f..node * f + f];
            for (k, z) in c.iter().enumerate() {
                out[k] += z * (w * scale[usize::from(k >= half)]);
            }
        };
        match self.dim {
            1 => {
                for i in 0..4 {
                    add(wrap(st.base[0], i), st.weights[0][i]);
                }
            }
            2 => {
                for i in 0..4 {
                    let row = wrap(st.base[0], i) * n;
                    for j in 0..4 {
                        add(row + wrap(st.base[1], j), st.weights[0][i] * st.weights[1][j]);
                    }
                }
            }
            _ => {
                for i in 0..4 {
                    let a = wrap(st.base[0], i) * n;
                    for j in 0..4 {
                        let b = (a + wrap(st.base[1], j)) * n;
                        let wij = st.weights[0][i] * st.weights[1][j];
                        for l in 0..4 {
                            add(b + wrap(st.base[2], l), wij * st.weights[2][l]);
                        }
                    }
                }
            }
        }
    }

    /// `(ψ, ∇ψ)` of this frame at `q`.
    pub fn eval(&self, q: &Point) -> (Complex64, [Complex64; 3]) {
        let st = self.stencil(q);
        let mut acc = [Complex64::default(); 8];
        self.accumulate(&st, [1.0, 0.0], &mut acc);
        (acc[0], [acc[1], acc[2], acc[3]])
    }
}

/// Velocity field over a run of consecutive frames.
#[derive(Debug, Clone)]
pub struct VelocityField {
    frames: Vec<FrameInterpolant>,
    node_eps: f64,
}

impl VelocityField {
    pub fn new(frames: Vec<FrameInterpolant>, node_eps: f64) -> Result<Self, Error> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("velocity field needs at least one frame".into()));
        }
        if frames.windows(2).any(|w| !(w[1].time > w[0].time)) {
            return Err(Error::InvalidArgument("frame times must increase".into()));
        }
        Ok(Self { frames, node_eps })
    }

    /// Builds interpolants for every frame of an in-memory run.
    pub fn from_frames(frames: &[Field], potential: &Potential, oversample: usize) -> Result<Self, Error> {
        let grid = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("no frames".into()))?
            .grid;
        let builder = InterpolantBuilder::new(grid, potential, oversample)?;
        let interps = frames.iter().map(|f| builder.build(f)).collect::<Result<Vec<_>, _>>()?;
        Self::new(interps, NODE_EPS)
    }

    pub fn start(&self) -> f64 {
        self.frames[0].time
    }

    pub fn end(&self) -> f64 {
        self.frames[self.frames.len() - 1].time
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim
    }

    pub fn half_extent(&self) -> f64 {
        self.frames[0].half_extent
    }

    fn segment(&self, t: f64) -> Result<usize, Error> {
        let (start, end) = (self.start(), self.end());
        let slack = 1e-9 * (1.0 + end.abs());
        if t < start - slack || t > end + slack {
            return Err(Error::OutsideFrames { t, start, end });
        }
        let k = self.frames.partition_point(|f| f.time <= t);
        Ok(k.saturating_sub(1).min(self.frames.len().saturating_sub(2)))
    }

    /// Interpolated `(ψ, ∇ψ)` at `(q, t)` and the amplitude scale used for
    /// the node test.
    pub fn fields(&self, q: &Point, t: f64) -> Result<(Complex64, [Complex64; 3], f64), Error> {
        let i = self.segment(t)?;
        let f0 = &self.frames[i];
        if self.frames.len() == 1 {
            let (p, g) = f0.eval(q);
            return Ok((p, g, f0.max_abs));
        }
        let f1 = &self.frames[i + 1];
        let h = f1.time - f0.time;
        let s = ((t - f0.time) / h).clamp(0.0, 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = (s3 - 2.0 * s2 + s) * h;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = (s3 - s2) * h;
        let st = f0.stencil(q);
        let mut acc = [Complex64::default(); 8];
        f0.accumulate(&st, [h00, h10], &mut acc);
        f1.accumulate(&st, [h01, h11], &mut acc);
        let d = f0.dim;
        // slot layout: [ψ, ∇ψ…, ∂ₜψ, ∂ₜ∇ψ…]; fold the time-derivative half in
        let half = 1 + d;
        let mut grad = [Complex64::default(); 3];
        for a in 0..d {
            grad[a] = acc[1 + a] + acc[half + 1 + a];
        }
        Ok((acc[0] + acc[half], grad, f0.max_abs.max(f1.max_abs)))
    }

    /// `Im(∇ψ/ψ)` at `(q, t)`; `NodeProximity` when `|ψ| ≤ ε_node·max|ψ|`.
    pub fn velocity(&self, q: &Point, t: f64) -> Result<Point, Error> {
        self.velocity_with(q, t, self.node_eps)
    }

    fn velocity_with(&self, q: &Point, t: f64, node_eps: f64) -> Result<Point, Error> {
        let (psi, grad, scale) = self.fields(q, t)?;
        let m = psi.norm_sqr();
        if m.sqrt() <= node_eps * scale {
            return Err(Error::NodeProximity { t });
        }
        let mut v = [0.0; 3];
        for a in 0..self.dim() {
            v[a] = (psi.conj() * grad[a]).im / m;
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Completed,
    NodeEncounter,
    LeftBox,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Completed => "completed",
            Status::NodeEncounter => "node_encounter",
            Status::LeftBox => "left_box",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub q: Point,
    pub v: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub q0: Point,
    pub status: Status,
    pub samples: Vec<Sample>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl Trajectory {
    pub fn final_sample(&self) -> Option<&Sample> {
        self.samples.last()
    }

    /// Sample recorded at time `t` (exact match up to round-off).
    pub fn at(&self, t: f64) -> Option<&Sample> {
        self.samples.iter().find(|s| (s.t - t).abs() <= 1e-9 * (1.0 + t.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub shell_fraction: f64,
    pub node_eps: f64,
    /// Spatial refinement before spline fitting; `None` picks by dimension.
    pub oversample: Option<usize>,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h_init: 1e-3,
            h_min: 1e-10,
            shell_fraction: LEFT_BOX_SHELL,
            node_eps: NODE_EPS,
            oversample: None,
        }
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Continuous extension of order 4.
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Integration state of one trajectory, advanced one frame slab at a time.
#[derive(Debug, Clone)]
struct Tracker {
    traj: Trajectory,
    q: Point,
    t: f64,
    h: f64,
    next_output: usize,
    active: bool,
}

impl Tracker {
    fn new(id: usize, q0: Point, t0: f64, opts: &IntegratorOptions) -> Self {
        Self {
            traj: Trajectory {
                id,
                q0,
                status: Status::Completed,
                samples: Vec::new(),
                accepted_steps: 0,
                rejected_steps: 0,
            },
            q: q0,
            t: t0,
            h: opts.h_init,
            next_output: 0,
            active: true,
        }
    }

    fn record(&mut self, field: &VelocityField, t: f64, q: Point, opts: &IntegratorOptions) {
        let v = field.velocity_with(&q, t, opts.node_eps).unwrap_or([f64::NAN; 3]);
        let d = field.dim();
        let mut v3 = [0.0; 3];
        v3[..d].copy_from_slice(&v[..d]);
        self.traj.samples.push(Sample { t, q, v: v3 });
    }

    fn outside(&self, q: &Point, dim: usize, half_extent: f64, opts: &IntegratorOptions) -> bool {
        let limit = (1.0 - opts.shell_fraction) * half_extent;
        q[..dim].iter().any(|x| !(x.abs() <= limit))
    }

    /// Integrates from the current time up to `t_stop`, which must lie in the
    /// field's frame range.
    fn advance(&mut self, field: &VelocityField, t_stop: f64, outputs: &[f64], opts: &IntegratorOptions) {
        let d = field.dim();
        let half_extent = field.half_extent();
        let eps = 1e-12 * (1.0 + t_stop.abs());
        while self.active && self.next_output < outputs.len() && outputs[self.next_output] <= self.t + eps {
            let t_out = outputs[self.next_output];
            if (t_out - self.t).abs() <= eps {
                self.record(field, t_out, self.q, opts);
            }
            self.next_output += 1;
        }
        if self.active && self.outside(&self.q, d, half_extent, opts) {
            self.traj.status = Status::LeftBox;
            self.active = false;
        }
        let mut k = [[0.0f64; 3]; 7];
        while self.active && self.t < t_stop - eps {
            let mut h = self.h.min(t_stop - self.t);
            if t_stop - (self.t + h) < eps {
                h = t_stop - self.t;
            }
            // stages; a node hit shrinks the step
            let mut failed = false;
            for s in 0..7 {
                let mut y = self.q;
                for (j, kj) in k.iter().enumerate().take(s) {
                    for a in 0..d {
                        y[a] += h * A[s][j] * kj[a];
                    }
                }
                match field.velocity_with(&y, self.t + C[s] * h, opts.node_eps) {
                    Ok(v) => k[s] = v,
                    Err(_) => {
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                self.traj.rejected_steps += 1;
                self.h = h * 0.25;
                if self.h < opts.h_min {
                    self.traj.status = Status::NodeEncounter;
                    self.active = false;
                }
                continue;
            }
            let mut y1 = [0.0; 3];
            let mut err = 0.0;
            for a in 0..d {
                y1[a] = self.q[a] + h * (0..6).map(|j| A[6][j] * k[j][a]).sum::<f64>();
                let e = h * (0..7).map(|j| E[j] * k[j][a]).sum::<f64>();
                let sc = opts.atol + opts.rtol * self.q[a].abs().max(y1[a].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / d as f64).sqrt();
            if !err.is_finite() {
                self.traj.rejected_steps += 1;
                self.h = h * 0.25;
                if self.h < opts.h_min {
                    self.traj.status = Status::NodeEncounter;
                    self.active = false;
                }
                continue;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            if err > 1.0 {
                self.traj.rejected_steps += 1;
                self.h = h * factor.min(1.0);
                if self.h < opts.h_min {
                    self.traj.status = Status::NodeEncounter;
                    self.active = false;
                }
                continue;
            }
            // dense output for requested times inside (t, t + h]
            let t_new = self.t + h;
            while self.next_output < outputs.len() && outputs[self.next_output] <= t_new + eps {
                let t_out = outputs[self.next_output];
                let theta = ((t_out - self.t) / h).clamp(0.0, 1.0);
                let q_out = if (t_out - t_new).abs() <= eps {
                    y1
                } else {
                    self.dense(&k, &y1, h, theta, d)
                };
                self.record(field, t_out.min(t_new), q_out, opts);
                self.next_output += 1;
            }
            self.q = y1;
            self.t = if (t_new - t_stop).abs() <= eps { t_stop } else { t_new };
            self.traj.accepted_steps += 1;
            // a step shortened to hit the slab end keeps the earlier proposal
            let clamped = h < self.h;
            self.h = if clamped { self.h.max(h * factor) } else { h * factor };
            if self.outside(&self.q, d, half_extent, opts) {
                self.traj.status = Status::LeftBox;
                self.active = false;
            }
        }
    }

    fn dense(&self, k: &[[f64; 3]; 7], y1: &Point, h: f64, theta: f64, d: usize) -> Point {
        let t1 = 1.0 - theta;
        let mut out = [0.0; 3];
        for a in 0..d {
            let y0 = self.q[a];
            let diff = y1[a] - y0;
            let bspl = h * k[0][a] - diff;
            let r4 = diff - h * k[6][a] - bspl;
            let r5 = h * (0..7).map(|j| D[j] * k[j][a]).sum::<f64>();
            out[a] = y0 + theta * (diff + t1 * (bspl + theta * (r4 + t1 * r5)));
        }
        out
    }

    fn finish(self) -> Trajectory {
        self.traj
    }
}

fn check_outputs(outputs: &[f64], t0: f64) -> Result<(), Error> {
    if outputs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(
            "output times must be strictly increasing".into(),
        ));
    }
    if outputs.first().is_some_and(|&t| t < t0 - 1e-12 * (1.0 + t0.abs())) {
        return Err(Error::InvalidArgument("output times precede the start time".into()));
    }
    Ok(())
}

/// Integrates a single trajectory from `(q0, t0)` to `t_end`, recording
/// samples at `output_times`. Steps are aligned with frame times.
pub fn integrate(
    field: &VelocityField,
    q0: Point,
    t0: f64,
    t_end: f64,
    output_times: &[f64],
    opts: &IntegratorOptions,
) -> Result<Trajectory, Error> {
    if !(t0 < t_end) {
        return Err(Error::InvalidArgument(format!("need t0 < t_end, got {t0} and {t_end}")));
    }
    field.segment(t0)?;
    field.segment(t_end)?;
    check_outputs(output_times, t0)?;
    if output_times
        .last()
        .is_some_and(|&t| t > t_end + 1e-12 * (1.0 + t_end.abs()))
    {
        return Err(Error::InvalidArgument("output times exceed t_end".into()));
    }
    let mut tracker = Tracker::new(0, q0, t0, opts);
    let mut stops: Vec<f64> = field
        .frame_times()
        .into_iter()
        .filter(|&s| s > t0 && s < t_end)
        .collect();
    stops.push(t_end);
    for stop in stops {
        tracker.advance(field, stop, output_times, opts);
    }
    Ok(tracker.finish())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub completed: usize,
    pub node_encounter: usize,
    pub left_box: usize,
}

impl StatusCounts {
    pub fn total(&self) -> usize {
        self.completed + self.node_encounter + self.left_box
    }

    fn from_trajectories(trajs: &[Trajectory]) -> Self {
        let mut c = Self::default();
        for t in trajs {
            match t.status {
                Status::Completed => c.completed += 1,
                Status::NodeEncounter => c.node_encounter += 1,
                Status::LeftBox => c.left_box += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnsemble {
    pub seed: u64,
    pub output_times: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub counts: StatusCounts,
}

impl TrajectoryEnsemble {
    pub fn completed(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.status == Status::Completed)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Samples `count` initial points from the first frame and integrates them
/// through the stream of frames. Only two frames are interpolated at any
/// time; trajectories are advanced in parallel and merged by index.
pub fn run_ensemble<I>(
    frames: I,
    potential: &Potential,
    count: usize,
    seed: u64,
    output_times: &[f64],
    opts: &IntegratorOptions,
) -> Result<TrajectoryEnsemble, Error>
where
    I: IntoIterator<Item = Result<Field, Error>>,
{
    let mut frames = frames.into_iter();
    let first = frames
        .next()
        .ok_or_else(|| Error::InvalidArgument("no frames".into()))??;
    let t0 = first.time;
    check_outputs(output_times, t0)?;
    if count == 0 {
        return Ok(TrajectoryEnsemble {
            seed,
            output_times: output_times.to_vec(),
            trajectories: Vec::new(),
            counts: StatusCounts::default(),
        });
    }
    let starts = sample_density(&first, count, seed)?;
    let builder = InterpolantBuilder::new(
        first.grid,
        potential,
        opts.oversample.unwrap_or_else(|| default_oversample(first.grid.dim())),
    )?;
    let mut trackers: Vec<Tracker> = starts
        .into_iter()
        .enumerate()
        .map(|(i, q)| Tracker::new(i, q, t0, opts))
        .collect();
    let mut previous = builder.build(&first)?;
    drop(first);
    for frame in frames {
        let frame = frame?;
        let next = builder.build(&frame)?;
        let t_stop = next.time;
        let field = VelocityField::new(vec![previous, next], opts.node_eps)?;
        trackers
            .par_iter_mut()
            .for_each(|tr| tr.advance(&field, t_stop, output_times, opts));
        previous = field.frames.into_iter().nth(1).expect("two frames");
    }
    let trajectories: Vec<Trajectory> = trackers.into_iter().map(Tracker::finish).collect();
    if trajectories
        .iter()
        .any(|t| t.status == Status::Completed && t.samples.len() != output_times.len())
    {
        return Err(Error::InvalidArgument(
            "output times extend beyond the last frame".into(),
        ));
    }
    let counts = StatusCounts::from_trajectories(&trajectories);
    Ok(TrajectoryEnsemble {
        seed,
        output_times: output_times.to_vec(),
        trajectories,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{packet_field, FreeGaussian};
    use crate::field::Label;
    use crate::propagator::{evolve, EvolveOptions};

    fn free_run(sigma: f64, k0: f64, t_final: f64) -> crate::propagator::EvolutionFrames {
        let g = Grid::new(1, 60.0, 1024).unwrap();
        let psi = packet_field(g, &[0.0; 3], sigma, &[k0, 0.0, 0.0]);
        evolve(&psi, &Potential::Zero, t_final, 0.002, 5, &EvolveOptions::default()).unwrap()
    }

    #[test]
    fn spline_reproduces_node_values() {
        let g = Grid::new(2, 8.0, 32).unwrap();
        let psi = packet_field(g, &[0.5, -0.3, 0.0], 1.0, &[1.0, 0.5, 0.0]);
        for over in [1, 2] {
            let b = InterpolantBuilder::new(g, &Potential::Zero, over).unwrap();
            let f = b.build(&psi).unwrap();
            let grad = crate::field::gradient(&psi);
            for i in (0..g.len()).step_by(29) {
                let (p, dp) = f.eval(&g.position(i));
                assert!((p - psi.values[i]).norm() < 1e-12);
                assert!((dp[0] - grad[0].values[i]).norm() < 1e-10);
                assert!((dp[1] - grad[1].values[i]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn plane_wave_velocity_is_k0() {
        let g = Grid::new(1, 10.0, 64).unwrap();
        let k0 = 3.0 * g.k_spacing();
        let psi = Field::from_fn(g, 0.0, Label::Full, |p| Complex64::from_polar(1.0, k0 * p[0]));
        let mut later = psi.clone();
        later.time = 1.0;
        let field = VelocityField::from_frames(&[psi, later], &Potential::Zero, 1).unwrap();
        for x in [-9.3, -1.0, 0.0, 2.71, 9.9] {
            let v = field.velocity(&[x, 0.0, 0.0], 0.4).unwrap();
            assert!((v[0] - k0).abs() < 1e-10);
        }
        assert!(matches!(
            field.velocity(&[0.0; 3], 2.0),
            Err(Error::OutsideFrames { .. })
        ));
    }

    #[test]
    fn real_state_has_zero_velocity_and_node_errors() {
        let g = Grid::new(1, 10.0, 128).unwrap();
        let psi = Field::from_fn(g, 0.0, Label::Eigenstate, |p| {
            Complex64::new(p[0] * (-p[0] * p[0]).exp(), 0.0)
        });
        let field = VelocityField::from_frames(&[psi], &Potential::Zero, 1).unwrap();
        assert!(field.velocity(&[0.7, 0.0, 0.0], 0.0).unwrap()[0].abs() < 1e-12);
        assert!(matches!(
            field.velocity(&[0.0; 3], 0.0),
            Err(Error::NodeProximity { .. })
        ));
    }

    #[test]
    fn free_packet_velocity_field() {
        // σ₀ = 1, k₀ = 0: v(x, t) = x·t/(4 + t²), so v(2, 2) = 0.5
        let run = free_run(1.0, 0.0, 3.0);
        let field = VelocityField::from_frames(&run.frames, &Potential::Zero, 4).unwrap();
        let v = field.velocity(&[2.0, 0.0, 0.0], 2.0).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-8, "{}", v[0]);
        // between frames as well
        let oracle = FreeGaussian::new(0.0, 1.0, 0.0);
        let t = 1.2345;
        let v = field.velocity(&[1.3, 0.0, 0.0], t).unwrap();
        assert!((v[0] - oracle.velocity(1.3, t)).abs() < 1e-8);
    }

    #[test]
    fn free_packet_trajectories_match_oracle() {
        for k0 in [0.0, 2.0] {
            let run = free_run(1.0, k0, 4.0);
            let field = VelocityField::from_frames(&run.frames, &Potential::Zero, 4).unwrap();
            let oracle = FreeGaussian::new(0.0, 1.0, k0);
            let outputs = [0.0, 1.0, 2.5, 4.0];
            for x0 in [-1.5, 0.3, 2.0] {
                let tr = integrate(&field, [x0, 0.0, 0.0], 0.0, 4.0, &outputs, &Default::default()).unwrap();
                assert_eq!(tr.status, Status::Completed);
                assert_eq!(tr.samples.len(), outputs.len());
                for s in &tr.samples {
                    assert!((s.q[0] - oracle.trajectory(x0, s.t)).abs() < 1e-6, "x0 {x0} t {}", s.t);
                    assert!((s.v[0] - oracle.velocity(s.q[0], s.t)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn dense_output_between_frames() {
        let run = free_run(1.0, 2.0, 2.0);
        let field = VelocityField::from_frames(&run.frames, &Potential::Zero, 4).unwrap();
        let oracle = FreeGaussian::new(0.0, 1.0, 2.0);
        let outputs: Vec<f64> = (0..40).map(|i| 0.0123 + i as f64 * 0.0497).collect();
        let tr = integrate(&field, [0.4, 0.0, 0.0], 0.0, 2.0, &outputs, &Default::default()).unwrap();
        for s in &tr.samples {
            assert!((s.q[0] - oracle.trajectory(0.4, s.t)).abs() < 1e-6);
        }
    }

    #[test]
    fn eigenstate_trajectory_stays_put() {
        let g = Grid::new(1, 20.0, 128).unwrap();
        let v = Potential::PoschlTeller { lambda: 1.0 };
        let u = Field::from_fn(g, 0.0, Label::Eigenstate, |p| {
            Complex64::new(crate::analytic::poschl_teller_ground(1.0, p[0]), 0.0)
        });
        let run = evolve(&u, &v, 2.0, 0.0025, 40, &EvolveOptions::default()).unwrap();
        let field = VelocityField::from_frames(&run.frames, &v, 2).unwrap();
        let tr = integrate(&field, [0.8, 0.0, 0.0], 0.0, 2.0, &[2.0], &Default::default()).unwrap();
        assert!((tr.samples[0].q[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn leaving_the_box_is_flagged() {
        let g = Grid::new(1, 10.0, 64).unwrap();
        let k0 = 8.0 * g.k_spacing();
        let psi = Field::from_fn(g, 0.0, Label::Full, |p| Complex64::from_polar(1.0, k0 * p[0]));
        let mut later = psi.clone();
        later.time = 2.0;
        let field = VelocityField::from_frames(&[psi, later], &Potential::Zero, 1).unwrap();
        let tr = integrate(&field, [8.0, 0.0, 0.0], 0.0, 2.0, &[2.0], &Default::default()).unwrap();
        assert_eq!(tr.status, Status::LeftBox);
        assert!(tr.samples.is_empty());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let run = free_run(1.0, 0.0, 1.0);
        let field = VelocityField::from_frames(&run.frames, &Potential::Zero, 1).unwrap();
        let o = IntegratorOptions::default();
        assert!(integrate(&field, [0.0; 3], 1.0, 0.5, &[], &o).is_err());
        assert!(integrate(&field, [0.0; 3], 0.0, 2.0, &[], &o).is_err());
        assert!(integrate(&field, [0.0; 3], 0.0, 1.0, &[0.5, 0.2], &o).is_err());
        assert!(integrate(&field, [0.0; 3], 0.0, 0.5, &[0.8], &o).is_err());
    }

    #[test]
    fn ensemble_is_deterministic_and_ordered() {
        let run = free_run(1.0, 2.0, 2.0);
        let outputs = [0.0, 0.5, 1.0, 2.0];
        let go = |seed| {
            run_ensemble(
                run.frames.iter().cloned().map(Ok),
                &Potential::Zero,
                64,
                seed,
                &outputs,
                &Default::default(),
            )
            .unwrap()
        };
        let a = go(3);
        let b = go(3);
        assert_eq!(a, b);
        assert_eq!(a.counts.total(), 64);
        assert_eq!(a.counts.node_encounter, 0);
        assert_ne!(a.trajectories[0].q0, go(4).trajectories[0].q0);
        // slab-wise ensemble integration agrees with single integration
        let field = VelocityField::from_frames(&run.frames, &Potential::Zero, 4).unwrap();
        let single = integrate(&field, a.trajectories[5].q0, 0.0, 2.0, &outputs, &Default::default()).unwrap();
        for (s, e) in single.samples.iter().zip(&a.trajectories[5].samples) {
            assert!((s.q[0] - e.q[0]).abs() < 1e-12);
        }
        // no crossing in one dimension
        let mut order: Vec<&Trajectory> = a.trajectories.iter().collect();
        order.sort_by(|x, y| x.q0[0].total_cmp(&y.q0[0]));
        for w in order.windows(2) {
            for (s0, s1) in w[0].samples.iter().zip(&w[1].samples) {
                assert!(s0.q[0] <= s1.q[0]);
            }
        }
        let empty = run_ensemble(
            run.frames.iter().cloned().map(Ok),
            &Potential::Zero,
            0,
            1,
            &outputs,
            &Default::default(),
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn three_dimensional_interpolant() {
        let g = Grid::new(3, 12.0, 32).unwrap();
        let psi = packet_field(g, &[0.0; 3], 1.5, &[0.5, -0.25, 0.75]);
        let mut later = psi.clone();
        later.time = 0.1;
        let field = VelocityField::from_frames(&[psi.clone(), later], &Potential::Zero, 1).unwrap();
        let v = field.velocity(&[0.0; 3], 0.0).unwrap();
        assert!(
            (v[0] - 0.5).abs() < 1e-6 && (v[1] + 0.25).abs() < 1e-6 && (v[2] - 0.75).abs() < 1e-6,
            "{v:?}"
        );
    }
}
