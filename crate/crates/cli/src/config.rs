//! Experiment configuration: a versioned TOML schema describing the grid,
//! potential, initial state, time lattice, ensemble and analysis thresholds.

use std::path::{Path, PathBuf};

use bohmflow_core::analysis::SlowBall;
use bohmflow_core::propagator::step_count;
use bohmflow_core::{Grid, Potential};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::scenarios;

pub const SCHEMA_VERSION: u32 = 1;

/// Every claim `verify` knows how to evaluate.
pub const CLAIM_IDS: [&str; 21] = [
    "unitarity",
    "boundary",
    "isometry",
    "asymptote_converged",
    "asymptote_decreasing",
    "global_existence",
    "velocity_law",
    "bound_weight",
    "undecided",
    "slow_ball",
    "bound_delta_mass",
    "bound_sublinear",
    "velocity_decay_bounded",
    "velocity_decay_rate",
    "straightness",
    "good_set_stability",
    "plane_wave_residual",
    "plane_wave_l2",
    "crossing_bound",
    "crossing_quadrature",
    "equivariance",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub grid: GridSpec,
    pub potential: Potential,
    pub initial: InitialSpec,
    pub times: TimeSpec,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub spectral: SpectralSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub half_extent: f64,
    pub points: usize,
}

/// Initial wave function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSpec {
    /// Gaussian packet `exp(−|q−c|²/4σ²+ik₀·q)`; optionally projected onto
    /// the scattering subspace.
    Packet {
        center: Vec<f64>,
        sigma: f64,
        k0: Vec<f64>,
        #[serde(default)]
        project_bound: bool,
    },
    /// `√w·u_level + √(1−w)·g⊥`, where `g⊥` is the packet with every bound
    /// level removed, normalised.
    BoundMix {
        level: usize,
        bound_weight: f64,
        center: Vec<f64>,
        sigma: f64,
        k0: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub t_final: f64,
    pub dt: f64,
    pub frame_stride: usize,
    /// Classification onset `T`; defaults to `T_final/2`.
    #[serde(default)]
    pub onset: Option<f64>,
    /// Straightness window start; defaults to `0.7·T_final`.
    #[serde(default)]
    pub straight_onset: Option<f64>,
    /// Straightness window length `ΔT`; defaults to `0.1·T_final`.
    #[serde(default)]
    pub window: Option<f64>,
    /// Wave-operator time; picked from the packet's slowest momenta when
    /// absent.
    #[serde(default)]
    pub t_asym: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub count: usize,
    pub seed: u64,
    /// Uniformly spaced output samples over `(0, T_final]`, besides the
    /// times needed by the analysis.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub oversample: Option<usize>,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    /// Trajectories flattened into `ensemble.csv`.
    #[serde(default = "default_csv_trajectories")]
    pub csv_trajectories: usize,
}

fn default_samples() -> usize {
    200
}
fn default_rtol() -> f64 {
    1e-8
}
fn default_atol() -> f64 {
    1e-10
}
fn default_csv_trajectories() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSpec {
    pub max_levels: usize,
    pub tol: f64,
    /// Half-width of the central box used for the bound-state search.
    #[serde(default)]
    pub search_extent: Option<f64>,
    /// Potential decay order checked against the short-range class.
    pub decay_order: u32,
}

impl Default for SpectralSpec {
    fn default() -> Self {
        Self {
            max_levels: 8,
            tol: 1e-7,
            search_extent: None,
            decay_order: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    /// Speed floor `a` of the scattering predicate and slow-ball scale.
    pub speed_floor: f64,
    pub gamma: f64,
    /// Declared decay class of the bound part; enforces `γ < 2α`.
    pub alpha: Option<f64>,
    pub tail_fraction: f64,
    pub ladder_levels: usize,
    /// Claims to evaluate; all known claims when absent.
    pub claims: Option<Vec<String>>,
    /// Treat a non-converged wave operator as an invalid run.
    pub fatal_nonconvergence: bool,
    pub good_set: Option<GoodSetOverrides>,
    pub thresholds: Thresholds,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            speed_floor: 0.2,
            gamma: 0.5,
            alpha: None,
            tail_fraction: 0.5,
            ladder_levels: 4,
            claims: None,
            fatal_nonconvergence: false,
            good_set: None,
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoodSetOverrides {
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

/// Pass thresholds of the claims; defaults are the desk-scale acceptance
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub norm_drift: f64,
    pub isometry: f64,
    pub completed_fraction: f64,
    /// KS bound per axis; `1.63/√n` over the scattering sample when absent.
    pub ks: Option<f64>,
    pub bound_weight: f64,
    pub undecided: f64,
    pub delta_mass_fraction: f64,
    pub decay_bounded_fraction: f64,
    pub beta_min: f64,
    pub straightness_delta: f64,
    pub straightness_fraction: f64,
    pub good_set_violation: f64,
    pub plane_wave_fluctuation: f64,
    pub crossing_quadrature: f64,
    pub equivariance_ratio: f64,
    pub sublinear_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            norm_drift: 1e-8,
            isometry: 1e-4,
            completed_fraction: 0.99,
            ks: None,
            bound_weight: 0.05,
            undecided: 0.02,
            delta_mass_fraction: 0.99,
            decay_bounded_fraction: 0.99,
            beta_min: 0.4,
            straightness_delta: 0.1,
            straightness_fraction: 0.95,
            good_set_violation: 0.01,
            plane_wave_fluctuation: 0.2,
            crossing_quadrature: 0.05,
            equivariance_ratio: 3.0,
            sublinear_fraction: 0.99,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config from a file path, or a builtin scenario by name.
    pub fn load(source: &str) -> Result<Self> {
        let path = Path::new(source);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            return Self::from_toml(&text);
        }
        match scenarios::builtin(source) {
            Some(text) => Self::from_toml(text),
            None => Err(CliError::Config(format!(
                "'{source}' is neither a config file nor a builtin scenario"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() {
            return bad("name must not be empty".into());
        }
        let grid = self.grid()?;
        let d = grid.dim();
        self.potential.check(d)?;
        let (center, sigma, k0) = match &self.initial {
            InitialSpec::Packet { center, sigma, k0, .. } => (center, *sigma, k0),
            InitialSpec::BoundMix {
                bound_weight,
                center,
                sigma,
                k0,
                ..
            } => {
                if !(*bound_weight >= 0.0 && *bound_weight <= 1.0) {
                    return bad(format!("bound_weight must lie in [0, 1], got {bound_weight}"));
                }
                (center, *sigma, k0)
            }
        };
        if center.len() != d || k0.len() != d {
            return bad(format!("initial center and k0 need {d} components"));
        }
        if !(sigma > 0.0) {
            return bad(format!("initial sigma must be positive, got {sigma}"));
        }
        let t = &self.times;
        step_count(t.t_final, t.dt)?;
        if t.frame_stride == 0 {
            return bad("frame_stride must be positive".into());
        }
        let onset = self.onset();
        if !(onset > 0.0 && onset < t.t_final) {
            return bad(format!("onset {onset} must lie in (0, t_final)"));
        }
        let (s0, w) = (self.straight_onset(), self.window());
        if !(w > 0.0 && s0 >= 0.0 && s0 + w <= t.t_final) {
            return bad(format!(
                "straightness window [{s0}, {s0} + {w}] must fit in [0, t_final]"
            ));
        }
        if let Some(ta) = t.t_asym {
            if !(ta >= 0.0) {
                return bad(format!("t_asym must be non-negative, got {ta}"));
            }
            if ta > 0.0 {
                step_count(ta, t.dt)?;
            }
        }
        let a = &self.analysis;
        if !(a.speed_floor > 0.0) {
            return bad("speed_floor must be positive".into());
        }
        match a.alpha {
            Some(alpha) => {
                SlowBall::with_decay_class(a.speed_floor, onset, a.gamma, alpha)?;
            }
            None => {
                SlowBall::new(a.speed_floor, onset, a.gamma)?;
            }
        }
        if !(a.tail_fraction > 0.0 && a.tail_fraction < 1.0) {
            return bad("tail_fraction must lie in (0, 1)".into());
        }
        if a.ladder_levels < 2 {
            return bad("ladder_levels must be at least 2".into());
        }
        if let Some(claims) = &a.claims {
            if let Some(unknown) = claims.iter().find(|c| !CLAIM_IDS.contains(&c.as_str())) {
                return bad(format!("unknown claim '{unknown}'"));
            }
        }
        if self.ensemble.samples == 0 {
            return bad("ensemble.samples must be positive".into());
        }
        if self.spectral.max_levels == 0 || !(self.spectral.tol > 0.0) {
            return bad("spectral.max_levels and spectral.tol must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Ok(Grid::new(self.grid.dim, self.grid.half_extent, self.grid.points)?)
    }

    pub fn onset(&self) -> f64 {
        self.times.onset.unwrap_or(0.5 * self.times.t_final)
    }

    pub fn straight_onset(&self) -> f64 {
        self.times.straight_onset.unwrap_or(0.7 * self.times.t_final)
    }

    pub fn window(&self) -> f64 {
        self.times.window.unwrap_or(0.1 * self.times.t_final)
    }

    pub fn slow_ball(&self) -> Result<SlowBall> {
        let a = &self.analysis;
        Ok(SlowBall::new(a.speed_floor, self.onset(), a.gamma)?)
    }

    pub fn claim_enabled(&self, id: &str) -> bool {
        match &self.analysis.claims {
            Some(list) => list.iter().any(|c| c == id),
            None => true,
        }
    }

    /// Declared bound weight, if the initial state fixes it.
    pub fn declared_pp_weight(&self) -> Option<f64> {
        match self.initial {
            InitialSpec::BoundMix { bound_weight, .. } => Some(bound_weight),
            InitialSpec::Packet {
                project_bound: true, ..
            } => Some(0.0),
            InitialSpec::Packet { .. } => None,
        }
    }

    /// Output directory: explicit flag, then `BOHMFLOW_OUT`, then the
    /// config, then `runs/<name>`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os("BOHMFLOW_OUT").filter(|p| !p.is_empty()) {
            return PathBuf::from(p);
        }
        self.output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "tiny"

[grid]
dim = 1
half_extent = 20.0
points = 128

[potential]
family = "gaussian_well"
v0 = 1.0
w = 1.0

[initial]
kind = "packet"
center = [-5.0]
sigma = 1.0
k0 = [2.0]

[times]
t_final = 2.0
dt = 0.01
frame_stride = 10

[ensemble]
count = 16
seed = 7
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.potential, Potential::GaussianWell { v0: 1.0, w: 1.0 });
        assert_eq!(cfg.onset(), 1.0);
        assert!((cfg.straight_onset() - 1.4).abs() < 1e-12);
        assert!((cfg.window() - 0.2).abs() < 1e-12);
        assert_eq!(cfg.analysis.thresholds.equivariance_ratio, 3.0);
        assert!(cfg.claim_enabled("equivariance"));
        assert_eq!(cfg.ensemble.samples, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("seed = 7", "seed = 7\ncolour = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn schema_version_is_checked() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn times_must_be_ordered() {
        let text = MINIMAL.replace("frame_stride = 10", "frame_stride = 10\nonset = 3.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("dt = 0.01", "dt = 0.03");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn gamma_must_respect_declared_decay_class() {
        let text = format!("{MINIMAL}\n[analysis]\ngamma = 1.5\nalpha = 0.5\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = format!("{MINIMAL}\n[analysis]\ngamma = 0.5\nalpha = 0.5\n");
        assert!(ExperimentConfig::from_toml(&text).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let text = MINIMAL.replace("center = [-5.0]", "center = [-5.0, 0.0]");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn unknown_claims_are_rejected() {
        let text = format!("{MINIMAL}\n[analysis]\nclaims = [\"unitarity\", \"telepathy\"]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn explicit_output_flag_wins() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.output_dir(Some(Path::new("/tmp/x"))), PathBuf::from("/tmp/x"));
    }
}
