//! Empirical-distribution distances: Kolmogorov–Smirnov and 1-Wasserstein.

use crate::field::Density;

/// CDF of a piecewise-constant density on uniform cells.
#[derive(Debug, Clone)]
pub struct PiecewiseCdf {
    /// Left edge of the first cell.
    pub origin: f64,
    pub step: f64,
    /// Normalised cumulative mass at each cell edge (`len = cells + 1`).
    pub cumulative: Vec<f64>,
}

impl PiecewiseCdf {
    /// `weights[j]` is the mass of cell `j` centred at `first + j·step`.
    pub fn new(first: f64, step: f64, weights: &[f64]) -> Self {
        let total: f64 = weights.iter().sum();
        let mut cumulative = Vec::with_capacity(weights.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in weights {
            acc += w;
            cumulative.push(acc / total);
        }
        Self {
            origin: first - step / 2.0,
            step,
            cumulative,
        }
    }

    pub fn from_density(density: &Density, axis: usize) -> Self {
        let l = &density.lattice;
        Self::new(l.first, l.step, &density.marginal(axis))
    }

    pub fn edge(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.step
    }

    pub fn cells(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let u = (x - self.origin) / self.step;
        if u <= 0.0 {
            return 0.0;
        }
        let j = u.floor() as usize;
        if j >= self.cells() {
            return 1.0;
        }
        let frac = u - j as f64;
        self.cumulative[j] + frac * (self.cumulative[j + 1] - self.cumulative[j])
    }
}

/// `sup_x |F_n(x) − F(x)|` for the empirical CDF of `samples`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// One-percent critical value of the one-sample KS statistic, `1.63/√N`.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Exact `∫|F_n − F| dx` between the empirical CDF of `samples` and a
/// piecewise-linear CDF.
pub fn w1_to_cdf(samples: &[f64], cdf: &PiecewiseCdf) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut points: Vec<f64> = (0..=cdf.cells()).map(|j| cdf.edge(j)).collect();
    points.extend_from_slice(&sorted);
    points.sort_by(|a, b| a.total_cmp(b));
    let mut total = 0.0;
    let mut seen = 0usize;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        while seen < sorted.len() && sorted[seen] <= a {
            seen += 1;
        }
        if b <= a {
            continue;
        }
        let level = seen as f64 / n;
        // F is linear on [a, b] because b never passes a cell edge
        let fa = cdf.cdf(a) - level;
        let fb = cdf.cdf(b) - level;
        total += abs_linear_integral(fa, fb, b - a);
    }
    total
}

fn abs_linear_integral(fa: f64, fb: f64, width: f64) -> f64 {
    if fa * fb >= 0.0 {
        0.5 * (fa.abs() + fb.abs()) * width
    } else {
        0.5 * (fa * fa + fb * fb) / (fa.abs() + fb.abs()) * width
    }
}

/// `∫|F_a − F_b| dx` between two empirical CDFs.
pub fn w1_two_samples(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.total_cmp(y));
    sb.sort_by(|x, y| x.total_cmp(y));
    let mut all: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    all.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut ia, mut ib) = (0, 0);
    let mut total = 0.0;
    for w in all.windows(2) {
        while ia < sa.len() && sa[ia] <= w[0] {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= w[0] {
            ib += 1;
        }
        total += (ia as f64 / na - ib as f64 / nb).abs() * (w[1] - w[0]);
    }
    total
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Linearly interpolated quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, 0.5)
}

#[cfg(test)]
pub(crate) fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}
