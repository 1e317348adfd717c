//! Short-range potential families and the admissibility check against the
//! polynomial-decay class.

use serde::{Deserialize, Serialize};

use crate::{Error, Grid};

/// Tail margin `ε` added to the required decay exponent.
pub const DECAY_MARGIN: f64 = 0.1;

/// Smooth, bounded, real potential in units `ħ = m = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Potential {
    Zero,
    /// `−V0·exp(−|q|²/w²)`.
    GaussianWell {
        v0: f64,
        w: f64,
    },
    /// `−λ(λ+1)/2 · sech²(q)`, one dimension only.
    PoschlTeller {
        lambda: f64,
    },
    /// Radial `−V0·exp(−|q|²/w²)` intended for `d = 3`.
    SphericalGaussianWell {
        v0: f64,
        w: f64,
    },
    /// `V0·⟨q⟩^{−exponent}`: algebraic tail, used to probe the validator.
    SoftPower {
        v0: f64,
        exponent: f64,
    },
}

impl Potential {
    pub fn eval(&self, q: &[f64]) -> f64 {
        let r2: f64 = q.iter().map(|x| x * x).sum();
        match *self {
            Potential::Zero => 0.0,
            Potential::GaussianWell { v0, w } | Potential::SphericalGaussianWell { v0, w } => {
                -v0 * (-r2 / (w * w)).exp()
            }
            Potential::PoschlTeller { lambda } => {
                let s = 1.0 / q[0].cosh();
                -0.5 * lambda * (lambda + 1.0) * s * s
            }
            Potential::SoftPower { v0, exponent } => v0 * (1.0 + r2).powf(-exponent / 2.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Potential::Zero => "zero",
            Potential::GaussianWell { .. } => "gaussian_well",
            Potential::PoschlTeller { .. } => "poschl_teller",
            Potential::SphericalGaussianWell { .. } => "spherical_gaussian_well",
            Potential::SoftPower { .. } => "soft_power",
        }
    }

    /// Checks parameters and dimension compatibility.
    pub fn check(&self, dim: usize) -> Result<(), Error> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        match *self {
            Potential::Zero => Ok(()),
            Potential::GaussianWell { v0, w } | Potential::SphericalGaussianWell { v0, w } => {
                if !(v0.is_finite() && w > 0.0) {
                    return bad(format!("gaussian well needs finite V0 and w > 0 (V0={v0}, w={w})"));
                }
                Ok(())
            }
            Potential::PoschlTeller { lambda } => {
                if dim != 1 {
                    return bad("poschl_teller is one-dimensional".into());
                }
                if !(lambda > 0.0) {
                    return bad(format!("poschl_teller needs lambda > 0, got {lambda}"));
                }
                Ok(())
            }
            Potential::SoftPower { v0, exponent } => {
                if !(v0.is_finite() && exponent > 0.0) {
                    return bad(format!("soft_power needs exponent > 0, got {exponent}"));
                }
                Ok(())
            }
        }
    }

    /// Whether the family decays faster than any power.
    pub fn decays_exponentially(&self) -> bool {
        !matches!(self, Potential::SoftPower { .. })
    }

    /// Radius beyond which `|V| < rel·max|V|`.
    pub fn effective_radius(&self, rel: f64) -> f64 {
        match *self {
            Potential::Zero => 0.0,
            Potential::GaussianWell { w, .. } | Potential::SphericalGaussianWell { w, .. } => {
                w * (1.0 / rel).ln().sqrt()
            }
            Potential::PoschlTeller { .. } => (1.0 / rel.sqrt()).acosh(),
            Potential::SoftPower { exponent, .. } => ((1.0 / rel).powf(2.0 / exponent) - 1.0).max(0.0).sqrt(),
        }
    }

    /// Values at every node of `grid`.
    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        let d = grid.dim();
        (0..grid.len()).map(|i| self.eval(&grid.position(i)[..d])).collect()
    }
}

/// Outcome of [`validate_short_range`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortRangeReport {
    pub family: String,
    pub bounded: bool,
    pub max_abs: f64,
    /// Fitted decay exponent of `|V|` over the outer shell; infinite for
    /// exponentially decaying families.
    pub tail_exponent: f64,
    pub required_exponent: f64,
    pub pass: bool,
}

/// Checks membership in the class of potentials decaying like
/// `⟨q⟩^{−n−ε}`.
///
/// The tail exponent is the negated slope of `log|V|` against `log|q|`
/// along the positive first axis over `L/2 ≤ q < L`.
pub fn validate_short_range(potential: &Potential, n: u32, grid: &Grid) -> Result<ShortRangeReport, Error> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("decay order must be >= 2, got {n}")));
    }
    let values = potential.on_grid(grid);
    let max_abs = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let bounded = max_abs.is_finite();
    let required = n as f64 + DECAY_MARGIN;
    let tail_exponent = if potential.decays_exponentially() {
        f64::INFINITY
    } else {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let d = grid.dim();
        for j in 0..grid.points() {
            let x = grid.node(j);
            if x < grid.half_extent() / 2.0 {
                continue;
            }
            let mut q = [0.0; 3];
            q[0] = x;
            let v = potential.eval(&q[..d]).abs();
            if v == 0.0 {
                xs.clear();
                break;
            }
            xs.push(x.ln());
            ys.push(v.ln());
        }
        if xs.len() < 2 {
            f64::INFINITY
        } else {
            -crate::stats::slope(&xs, &ys)
        }
    };
    Ok(ShortRangeReport {
        family: potential.name().to_string(),
        bounded,
        max_abs,
        tail_exponent,
        required_exponent: required,
        pass: bounded && tail_exponent >= required,
    })
}
