//! The experiment pipeline: `propagate → split → asymptote → trajectories →
//! verify`. Every stage reads its inputs from the run directory and writes
//! its outputs there, so stages can be rerun independently.

use std::path::{Path, PathBuf};

use bohmflow_core::analysis::{
    binomial_margin, classify_ensemble, crossing_flux, decay_fit, dyadic_ladder, equivariance_test, escape_fraction,
    good_set, good_set_stability, straightness_report, sublinear_trend, velocity_law_test, Class, Classified,
    GoodSetParams, VerificationReport,
};
use bohmflow_core::analytic::packet_field;
use bohmflow_core::asymptotics::{
    default_t_asym, local_plane_wave, outgoing_asymptote, regularity_report, residuals, MomentumInterpolator,
    OutgoingAsymptote, RegularityReport, ResidualDiagnostics, CONVERGENCE_TOL, K_OVERSAMPLE,
};
use bohmflow_core::field::{fourier, Spectrum};
use bohmflow_core::potentials::{validate_short_range, ShortRangeReport};
use bohmflow_core::propagator::{evolve_with, EvolveOptions, BOUNDARY_MASS_THRESHOLD};
use bohmflow_core::spectral::{
    bound_states_embedded, check_decay_class, split, BoundStateOptions, BoundStates, EigenPair, SpectralDecomposition,
    ZERO_MARGIN,
};
use bohmflow_core::stats::slope;
use bohmflow_core::trajectories::{
    default_oversample, run_ensemble, IntegratorOptions, StatusCounts, TrajectoryEnsemble,
};
use bohmflow_core::{Field, Grid, Label, Point};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, InitialSpec, SCHEMA_VERSION};
use crate::error::{CliError, Result};
use crate::io::{self, Cell, CsvWriter, FrameStore, FramesManifest};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Propagate,
    Split,
    Asymptote,
    Trajectories,
    Verify,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Propagate,
        Stage::Split,
        Stage::Asymptote,
        Stage::Trajectories,
        Stage::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Propagate => "propagate",
            Stage::Split => "split",
            Stage::Asymptote => "asymptote",
            Stage::Trajectories => "trajectories",
            Stage::Verify => "verify",
        }
    }
}

/// Per-level metadata in `split.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub energy: f64,
    pub residual: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub levels: Vec<LevelRecord>,
    /// `⟨u_j, ψ₀⟩` as `[re, im]`.
    pub coefficients: Vec<[f64; 2]>,
    pub pp_weight: f64,
    pub ac_weight: f64,
    pub declared_pp_weight: Option<f64>,
    pub threshold_energy: Option<f64>,
    pub threshold_localization: Option<f64>,
    /// Proxy flag for a zero-energy eigenvalue or resonance.
    pub near_zero_flag: bool,
    pub zero_margin: f64,
    pub short_range: ShortRangeRecord,
}

/// [`ShortRangeReport`] with an infinite tail exponent (exponential decay)
/// written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShortRangeRecord {
    pub family: String,
    pub bounded: bool,
    pub max_abs: f64,
    pub tail_exponent: Option<f64>,
    pub required_exponent: f64,
    pub pass: bool,
}

impl From<ShortRangeReport> for ShortRangeRecord {
    fn from(r: ShortRangeReport) -> Self {
        Self {
            family: r.family,
            bounded: r.bounded,
            max_abs: r.max_abs,
            tail_exponent: r.tail_exponent.is_finite().then_some(r.tail_exponent),
            required_exponent: r.required_exponent,
            pass: r.pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoteRecord {
    pub t_asym: f64,
    pub converged: bool,
    pub valid: bool,
    pub input_norm: f64,
    pub output_norm: f64,
    pub isometry_defect: f64,
    /// `[t_c, increment]` pairs.
    pub convergence_log: Vec<[f64; 2]>,
    pub mean_wavevector: Vec<f64>,
    pub regularity: RegularityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub count: usize,
    pub seed: u64,
    pub dim: usize,
    pub output_times: Vec<f64>,
    pub counts: StatusCounts,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// A configured run rooted at an output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Self {
            config,
            out: out.into(),
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Runs one stage; `verify` returns the report.
    pub fn run_stage(&self, stage: Stage) -> Result<Option<VerificationReport>> {
        match stage {
            Stage::Propagate => self.propagate().map(|_| None),
            Stage::Split => self.split().map(|_| None),
            Stage::Asymptote => self.asymptote().map(|_| None),
            Stage::Trajectories => self.trajectories().map(|_| None),
            Stage::Verify => self.verify().map(Some),
        }
    }

    /// Every stage in order; the report is written last.
    pub fn run_all(&self) -> Result<VerificationReport> {
        for stage in &Stage::ALL[..4] {
            self.run_stage(*stage)?;
        }
        self.verify()
    }

    fn grid(&self) -> Result<Grid> {
        self.config.grid()
    }

    fn bound_states(&self, grid: &Grid) -> Result<BoundStates> {
        let spec = &self.config.spectral;
        let options = BoundStateOptions {
            max_count: spec.max_levels,
            tol: spec.tol,
            ..Default::default()
        };
        let extent = spec.search_extent.unwrap_or_else(|| {
            let r = self.config.potential.effective_radius(1e-6);
            (4.0 * r).max(16.0).min(grid.half_extent())
        });
        Ok(bound_states_embedded(&self.config.potential, grid, extent, &options)?)
    }

    /// `ψ₀` on the configured grid.
    pub fn initial_state(&self) -> Result<Field> {
        let grid = self.grid()?;
        let pad = |v: &[f64]| -> Point { std::array::from_fn(|a| v.get(a).copied().unwrap_or(0.0)) };
        match &self.config.initial {
            InitialSpec::Packet {
                center,
                sigma,
                k0,
                project_bound,
            } => {
                let g = packet_field(grid, &pad(center), *sigma, &pad(k0));
                if !project_bound {
                    return Ok(g.normalized()?);
                }
                let levels = self.bound_states(&grid)?.levels;
                Ok(split(&g, &levels).psi_ac0.with_label(Label::Full).normalized()?)
            }
            InitialSpec::BoundMix {
                level,
                bound_weight,
                center,
                sigma,
                k0,
            } => {
                let levels = self.bound_states(&grid)?.levels;
                let u = levels.get(*level).ok_or_else(|| {
                    CliError::Config(format!("bound level {level} requested, {} found", levels.len()))
                })?;
                let g = packet_field(grid, &pad(center), *sigma, &pad(k0));
                let g_perp = split(&g, &levels).psi_ac0.normalized()?;
                let (a, b) = (bound_weight.sqrt(), (1.0 - bound_weight).sqrt());
                let values = u
                    .state
                    .values
                    .iter()
                    .zip(&g_perp.values)
                    .map(|(x, y)| a * x + b * y)
                    .collect();
                Ok(Field::new(grid, values, 0.0, Label::Full)?)
            }
        }
    }

    /// Evolves `ψ₀` to `T_final`, streaming frames to `frames/`.
    pub fn propagate(&self) -> Result<FramesManifest> {
        let cfg = &self.config;
        let psi0 = self.initial_state()?;
        let dir = self.path(io::FRAMES_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let mut files = Vec::new();
        let log = evolve_with(
            &psi0,
            &cfg.potential,
            cfg.times.t_final,
            cfg.times.dt,
            cfg.times.frame_stride,
            &EvolveOptions::default(),
            |frame| {
                let name = io::frame_file_name(files.len());
                io::write_field(&dir.join(&name), frame).map_err(|e| bohmflow_core::Error::Sink(e.to_string()))?;
                files.push(name);
                Ok(())
            },
        )?;
        let grid = psi0.grid;
        let manifest = FramesManifest {
            schema_version: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            dim: grid.dim(),
            points: grid.points(),
            half_extent: grid.half_extent(),
            dt: cfg.times.dt,
            frame_stride: cfg.times.frame_stride,
            potential: cfg.potential,
            files,
            log,
        };
        io::write_json(&self.path(io::MANIFEST), &manifest)?;
        if !manifest.log.valid {
            let worst = manifest.log.boundary_mass.iter().copied().fold(0.0, f64::max);
            return Err(CliError::InvalidRun(format!(
                "boundary mass {worst:.3e} exceeded {BOUNDARY_MASS_THRESHOLD:.0e}; enlarge the box or shorten the run"
            )));
        }
        Ok(manifest)
    }

    /// Bound-state search and `ψ₀ = ψ_pp + ψ_ac`.
    pub fn split(&self) -> Result<SplitRecord> {
        let store = FrameStore::open(&self.out)?;
        let psi0 = store.load(0)?;
        let grid = psi0.grid;
        let short_range = validate_short_range(&self.config.potential, self.config.spectral.decay_order, &grid)?;
        if !short_range.pass {
            return Err(CliError::Config(format!(
                "potential {} fails the short-range check: tail exponent {} < {}",
                short_range.family, short_range.tail_exponent, short_range.required_exponent
            )));
        }
        let found = self.bound_states(&grid)?;
        let decomposition = split(&psi0, &found.levels);
        let dir = self.path(io::EIGEN_DIR);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let mut levels = Vec::new();
        for (j, pair) in found.levels.iter().enumerate() {
            let file = format!("level_{j:02}.bfld");
            io::write_field(&dir.join(&file), &pair.state)?;
            levels.push(LevelRecord {
                energy: pair.energy,
                residual: pair.residual,
                file,
            });
        }
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        io::write_field(&self.path(io::PSI_AC0), &decomposition.psi_ac0)?;
        let record = SplitRecord {
            levels,
            coefficients: decomposition.coefficients.iter().map(|c| [c.re, c.im]).collect(),
            pp_weight: decomposition.pp_weight,
            ac_weight: decomposition.ac_weight,
            declared_pp_weight: self.config.declared_pp_weight(),
            threshold_energy: found.threshold_energy,
            threshold_localization: found.threshold_localization,
            near_zero_flag: found.near_zero_flag,
            zero_margin: ZERO_MARGIN,
            short_range: short_range.into(),
        };
        io::write_json(&self.path(io::SPLIT), &record)?;
        Ok(record)
    }

    /// Numerical wave operator applied to `ψ_ac,0`.
    pub fn asymptote(&self) -> Result<AsymptoteRecord> {
        let cfg = &self.config;
        let psi_ac0 = io::read_field(&self.path(io::PSI_AC0), "scattering component (run split first)")?;
        let t_asym = match cfg.times.t_asym {
            Some(t) => t,
            None => default_t_asym(&psi_ac0, &cfg.potential, cfg.times.dt, cfg.times.t_final),
        };
        let asym = outgoing_asymptote(&psi_ac0, &cfg.potential, t_asym, cfg.times.dt)?;
        io::write_spectrum(&self.path(io::PSI_OUT_HAT), &asym.psi_out_hat)?;
        let d = psi_ac0.grid.dim();
        let record = AsymptoteRecord {
            t_asym: asym.t_asym,
            converged: asym.converged,
            valid: asym.valid,
            input_norm: asym.input_norm,
            output_norm: asym.psi_out_hat.norm(),
            isometry_defect: asym.isometry_defect(),
            convergence_log: asym.convergence_log.iter().map(|&(t, e)| [t, e]).collect(),
            mean_wavevector: asym.psi_out_hat.mean_wavevector()[..d].to_vec(),
            regularity: regularity_report(&asym.psi_out_hat),
        };
        io::write_json(&self.path(io::ASYMPTOTE), &record)?;
        write_spectrum_csv(&self.path("spectrum.csv"), &asym.psi_out_hat, &fourier(&psi_ac0))?;
        if !asym.valid {
            return Err(CliError::InvalidRun(
                "boundary mass exceeded the threshold during the wave-operator run".into(),
            ));
        }
        if !asym.converged && cfg.analysis.fatal_nonconvergence {
            return Err(CliError::InvalidRun(format!(
                "wave operator did not converge by t = {}",
                asym.t_asym
            )));
        }
        Ok(record)
    }

    /// Output times: frame times chosen so every analysis finds its samples.
    pub fn output_times(&self, manifest: &FramesManifest) -> Vec<f64> {
        let times = manifest.times();
        let last = times.len() - 1;
        let t_final = times[last];
        let m = self.config.ensemble.samples;
        let mut idx: Vec<usize> = (0..=m)
            .map(|j| ((j * last) as f64 / m as f64).round() as usize)
            .collect();
        for t in self.analysis_times(t_final) {
            idx.push(manifest.nearest(t));
        }
        idx.sort_unstable();
        idx.dedup();
        idx.into_iter().map(|i| times[i]).collect()
    }

    fn analysis_times(&self, t_final: f64) -> Vec<f64> {
        let cfg = &self.config;
        let mut v = dyadic_ladder(t_final, cfg.analysis.ladder_levels, 0.0);
        v.extend([
            0.0,
            t_final / 8.0,
            t_final / 4.0,
            t_final / 2.0,
            t_final,
            cfg.onset(),
            cfg.straight_onset(),
            cfg.straight_onset() + cfg.window(),
        ]);
        v
    }

    /// Integrates the guidance equation for the configured ensemble.
    pub fn trajectories(&self) -> Result<EnsembleSummary> {
        let cfg = &self.config;
        let store = FrameStore::open(&self.out)?;
        let outputs = self.output_times(&store.manifest);
        let opts = IntegratorOptions {
            rtol: cfg.ensemble.rtol,
            atol: cfg.ensemble.atol,
            oversample: cfg.ensemble.oversample,
            ..Default::default()
        };
        let ens = run_ensemble(
            store.stream(0),
            &store.manifest.potential,
            cfg.ensemble.count,
            cfg.ensemble.seed,
            &outputs,
            &opts,
        )?;
        let dim = store.manifest.dim;
        io::write_ensemble_ndjson(&self.path(io::ENSEMBLE), &ens, dim)?;
        write_ensemble_csv(&self.path(io::ENSEMBLE_CSV), &ens, dim, cfg.ensemble.csv_trajectories)?;
        let summary = EnsembleSummary {
            count: ens.len(),
            seed: ens.seed,
            dim,
            output_times: outputs,
            counts: ens.counts,
            accepted_steps: ens.trajectories.iter().map(|t| t.accepted_steps).sum(),
            rejected_steps: ens.trajectories.iter().map(|t| t.rejected_steps).sum(),
        };
        io::write_json(&self.path(io::ENSEMBLE_SUMMARY), &summary)?;
        Ok(summary)
    }

    /// Loads every artifact of the run for analysis.
    pub fn load_artifacts(&self) -> Result<Artifacts> {
        let store = FrameStore::open(&self.out)?;
        let split_record: SplitRecord = io::read_json(&self.path(io::SPLIT), "split metadata")?;
        let mut levels = Vec::new();
        for l in &split_record.levels {
            let state = io::read_field(&self.path(io::EIGEN_DIR).join(&l.file), "eigenstate")?;
            levels.push(EigenPair {
                energy: l.energy,
                state,
                residual: l.residual,
            });
        }
        let frame0 = store.load(0)?;
        let decomposition = split(&frame0, &levels);
        let asymptote_record: AsymptoteRecord = io::read_json(&self.path(io::ASYMPTOTE), "asymptote metadata")?;
        let psi_out_hat = io::read_spectrum(&self.path(io::PSI_OUT_HAT), "outgoing asymptote")?;
        let summary: EnsembleSummary = io::read_json(&self.path(io::ENSEMBLE_SUMMARY), "ensemble summary")?;
        let trajectories = io::read_ensemble_ndjson(&self.path(io::ENSEMBLE), summary.dim)?;
        let ensemble = TrajectoryEnsemble {
            seed: summary.seed,
            output_times: summary.output_times.clone(),
            trajectories,
            counts: summary.counts,
        };
        let asymptote = OutgoingAsymptote {
            psi_out_hat,
            t_asym: asymptote_record.t_asym,
            convergence_log: asymptote_record.convergence_log.iter().map(|p| (p[0], p[1])).collect(),
            converged: asymptote_record.converged,
            valid: asymptote_record.valid,
            input_norm: asymptote_record.input_norm,
        };
        Ok(Artifacts {
            store,
            split: split_record,
            decomposition,
            asymptote,
            ensemble,
        })
    }

    /// Evaluates the enabled claims from on-disk artifacts and writes the
    /// report, the claim table and the plotting tables.
    pub fn verify(&self) -> Result<VerificationReport> {
        let art = self.load_artifacts()?;
        let report = Verifier::new(self, &art)?.run()?;
        io::write_json(&self.path(io::REPORT), &report)?;
        let mut csv = CsvWriter::create(
            &self.path(io::SUMMARY_CSV),
            &["id", "statistic", "threshold", "pass", "description"],
        )?;
        for c in &report.claims {
            csv.row(&[
                Cell::Text(&c.id),
                Cell::Num(c.statistic),
                Cell::Num(c.threshold),
                Cell::Text(if c.pass { "true" } else { "false" }),
                Cell::Text(&c.description),
            ])?;
        }
        csv.finish()?;
        Ok(report)
    }
}

/// Everything `verify` consumes.
pub struct Artifacts {
    pub store: FrameStore,
    pub split: SplitRecord,
    pub decomposition: SpectralDecomposition,
    pub asymptote: OutgoingAsymptote,
    pub ensemble: TrajectoryEnsemble,
}

struct Verifier<'a> {
    pipe: &'a Pipeline,
    cfg: &'a ExperimentConfig,
    art: &'a Artifacts,
    report: VerificationReport,
    classified: Classified,
    t_final: f64,
}

impl<'a> Verifier<'a> {
    fn new(pipe: &'a Pipeline, art: &'a Artifacts) -> Result<Self> {
        let cfg = &pipe.config;
        let ball = cfg.slow_ball()?;
        let classified = classify_ensemble(
            &art.ensemble,
            &ball,
            cfg.analysis.speed_floor,
            cfg.analysis.tail_fraction,
        );
        let times = art.store.manifest.times();
        Ok(Self {
            pipe,
            cfg,
            art,
            report: VerificationReport::new(cfg.name.clone()),
            classified,
            t_final: times[times.len() - 1],
        })
    }

    fn on(&self, id: &str) -> bool {
        self.cfg.claim_enabled(id)
    }

    /// Nearest frame time.
    fn snap(&self, t: f64) -> f64 {
        let m = &self.art.store.manifest;
        m.times()[m.nearest(t)]
    }

    fn run(mut self) -> Result<VerificationReport> {
        self.propagation_claims();
        self.velocity_claims()?;
        self.bound_claims()?;
        self.decay_claims()?;
        self.plane_wave_claims()?;
        self.crossing_claims()?;
        self.equivariance_claims()?;
        self.write_tables()?;
        Ok(self.report)
    }

    fn propagation_claims(&mut self) {
        let th = self.cfg.analysis.thresholds;
        let log = &self.art.store.manifest.log;
        let norm0 = log.norms.first().copied().unwrap_or(1.0);
        self.report.constant("norm_initial", norm0);
        if log.energies.len() > 1 {
            self.report
                .constant("energy_relative_drift", log.max_relative_energy_drift());
        }
        if self.on("unitarity") {
            self.report.at_most(
                "unitarity",
                "max |‖ψ_t‖ − ‖ψ_0‖| over retained frames",
                log.max_norm_drift(),
                th.norm_drift,
            );
        }
        if self.on("boundary") {
            let worst = log.boundary_mass.iter().copied().fold(0.0, f64::max);
            self.report.push(
                "boundary",
                "largest outer-shell mass fraction over frames",
                worst,
                BOUNDARY_MASS_THRESHOLD,
                log.valid,
            );
        }
        let asym = &self.art.asymptote;
        let defect = (asym.psi_out_hat.norm() - self.art.decomposition.psi_ac0.norm()).abs();
        self.report.constant("t_asym", asym.t_asym);
        self.report.constant("pp_weight", self.art.split.pp_weight);
        self.report
            .constant("near_zero_flag", f64::from(u8::from(self.art.split.near_zero_flag)));
        if self.on("isometry") {
            self.report
                .at_most("isometry", "|‖ψ̂^out‖ − ‖ψ_ac,0‖|", defect, th.isometry);
        }
        let last = asym.convergence_log.last().map(|p| p.1).unwrap_or(0.0);
        let rel = last / asym.input_norm.max(f64::MIN_POSITIVE);
        self.report.constant("asymptote_relative_increment", rel);
        if self.on("asymptote_converged") {
            self.report.push(
                "asymptote_converged",
                "last wave-operator increment relative to ‖ψ_ac,0‖",
                rel,
                CONVERGENCE_TOL,
                asym.converged,
            );
        }
        if self.on("asymptote_decreasing") {
            // the increments over the last two checkpoint intervals
            let tail: Vec<f64> = asym.convergence_log.iter().rev().take(2).map(|p| p.1).collect();
            let ratio = if tail.len() == 2 { tail[0] / tail[1] } else { f64::NAN };
            self.report.push(
                "asymptote_decreasing",
                "ratio of the last two wave-operator increments; must stay below one",
                ratio,
                1.0,
                ratio < 1.0,
            );
        }
        if self.on("global_existence") {
            let ens = &self.art.ensemble;
            let frac = if ens.is_empty() {
                1.0
            } else {
                ens.counts.completed as f64 / ens.len() as f64
            };
            self.report
                .constant("node_encounters", ens.counts.node_encounter as f64);
            self.report.constant("left_box", ens.counts.left_box as f64);
            self.report.at_least(
                "global_existence",
                "fraction of trajectories integrated to T_final",
                frac,
                th.completed_fraction,
            );
        }
    }

    fn velocity_claims(&mut self) -> Result<()> {
        let th = self.cfg.analysis.thresholds;
        let law = velocity_law_test(
            &self.classified,
            &self.art.asymptote.psi_out_hat,
            self.art.split.pp_weight,
            self.art.ensemble.seed,
        )?;
        self.report.constant("bound_fraction", law.bound_fraction);
        self.report.constant("undecided_fraction", law.undecided_fraction);
        self.report.constant("scattering_count", law.counts.scattering as f64);
        if let (Some(w), Some(b)) = (law.sliced_w1, law.sliced_w1_baseline) {
            self.report.constant("velocity_sliced_w1", w);
            self.report.constant("velocity_sliced_w1_baseline", b);
        }
        if self.on("velocity_law") {
            let ks = if law.ks_per_axis.is_empty() {
                f64::NAN
            } else {
                law.max_ks()
            };
            // the critical value belongs to the scattering sample actually tested
            let threshold = th.ks.unwrap_or(law.ks_critical);
            self.report.at_most(
                "velocity_law",
                "max per-axis KS distance of scattering v∞ against |ψ̂^out|²",
                ks,
                threshold,
            );
        }
        if self.on("bound_weight") {
            self.report.at_most(
                "bound_weight",
                "|bound fraction − ‖ψ_pp‖²|",
                (law.bound_fraction - law.pp_weight).abs(),
                th.bound_weight,
            );
        }
        if self.on("undecided") {
            self.report
                .at_most("undecided", "undecided fraction", law.undecided_fraction, th.undecided);
        }
        Ok(())
    }

    fn bound_indices(&self) -> Vec<usize> {
        (0..self.classified.class.len())
            .filter(|&i| self.classified.class[i] == Class::Bound)
            .collect()
    }

    fn bound_claims(&mut self) -> Result<()> {
        let th = self.cfg.analysis.thresholds;
        let bound = self.bound_indices();
        let frac = |hits: usize| {
            if bound.is_empty() {
                1.0
            } else {
                hits as f64 / bound.len() as f64
            }
        };
        self.report.constant("bound_count", bound.len() as f64);
        if self.on("slow_ball") {
            let a = &self.cfg.analysis;
            let alpha = a.alpha.unwrap_or(a.gamma);
            let onset = self.cfg.onset();
            let frames: Vec<Field> = (0..=8)
                .map(|j| {
                    self.art
                        .decomposition
                        .pp_at(onset + (self.t_final - onset) * j as f64 / 8.0)
                })
                .collect();
            let decay = check_decay_class(&frames, alpha)?;
            self.report.constant("pp_decay_bound", decay.bound);
            self.report.push(
                "slow_ball",
                "ψ_pp stays in the decay class admitting γ and bound trajectories exist",
                decay.tail_trend,
                1.0,
                decay.finite && !bound.is_empty(),
            );
        }
        if self.on("bound_delta_mass") {
            let limit = 2.0 / self.t_final;
            let hits = bound
                .iter()
                .filter(|&&i| {
                    self.classified.v_inf[i].is_some_and(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt() < limit)
                })
                .count();
            self.report.at_least(
                "bound_delta_mass",
                "fraction of bound trajectories with |v∞| < 2/T_final",
                frac(hits),
                th.delta_mass_fraction,
            );
        }
        if self.on("bound_sublinear") {
            let onset = self.cfg.onset();
            let hits = bound
                .iter()
                .filter(|&&i| {
                    sublinear_trend(&self.art.ensemble.trajectories[i], onset)
                        .is_some_and(|(early, late)| late <= early * (1.0 + 1e-9))
                })
                .count();
            self.report.at_least(
                "bound_sublinear",
                "fraction of bound trajectories with decreasing max |Q(t)|/t",
                frac(hits),
                th.sublinear_fraction,
            );
        }
        Ok(())
    }

    fn ladder(&self) -> Vec<f64> {
        let mut v: Vec<f64> = dyadic_ladder(self.t_final, self.cfg.analysis.ladder_levels, 0.0)
            .into_iter()
            .map(|t| self.snap(t))
            .filter(|&t| t > 0.0)
            .collect();
        v.dedup();
        v
    }

    fn decay_claims(&mut self) -> Result<()> {
        let th = self.cfg.analysis.thresholds;
        let ens = &self.art.ensemble;
        if self.on("velocity_decay_bounded") || self.on("velocity_decay_rate") {
            let ladder = self.ladder();
            let fit = decay_fit(ens, &self.classified, &ladder)?;
            let mut csv = CsvWriter::create(&self.pipe.path("decay.csv"), &["t", "median_error"])?;
            for (t, e) in fit.ladder.iter().zip(&fit.median_error) {
                csv.row(&[Cell::Num(*t), Cell::Num(*e)])?;
            }
            csv.finish()?;
            self.report.constant("beta_hat", fit.beta_hat);
            if self.on("velocity_decay_bounded") {
                self.report.at_least(
                    "velocity_decay_bounded",
                    "fraction of scattering trajectories with bounded t^{1/2}|v − v∞|",
                    fit.bounded_fraction,
                    th.decay_bounded_fraction,
                );
            }
            if self.on("velocity_decay_rate") {
                self.report.at_least(
                    "velocity_decay_rate",
                    "fitted exponent of the median |v − v∞|",
                    fit.beta_hat,
                    th.beta_min,
                );
            }
        }
        if self.on("straightness") {
            let start = self.snap(self.cfg.straight_onset());
            let window = self.cfg.window();
            let (mut total, mut hits) = (0usize, 0usize);
            let mut worst = 0.0f64;
            for (i, tr) in ens.trajectories.iter().enumerate() {
                let (Class::Scattering, Some(v)) = (self.classified.class[i], self.classified.v_inf[i]) else {
                    continue;
                };
                total += 1;
                if let Some(dev) = straightness_report(tr, &v, start, window) {
                    worst = worst.max(dev);
                    if dev < th.straightness_delta {
                        hits += 1;
                    }
                }
            }
            self.report.constant("straightness_max_deviation", worst);
            let frac = if total == 0 {
                f64::NAN
            } else {
                hits as f64 / total as f64
            };
            self.report.at_least(
                "straightness",
                "fraction of scattering trajectories straight to δ over the window",
                frac,
                th.straightness_fraction,
            );
        }
        if self.on("good_set_stability") {
            let spec = &self.art.asymptote.psi_out_hat;
            let onset = self.snap(self.cfg.onset());
            let mut p = GoodSetParams::defaults(spec, onset)?;
            if let Some(o) = self.cfg.analysis.good_set {
                p = GoodSetParams::new(
                    o.delta1.unwrap_or(p.delta1),
                    o.delta2.unwrap_or(p.delta2),
                    o.a.unwrap_or(p.a),
                    o.b.unwrap_or(p.b),
                    onset,
                )?;
            }
            let set = good_set(spec, &p);
            let stab = good_set_stability(ens, &set);
            self.report.constant("good_set_measure", set.measure);
            self.report.constant("good_set_inner_measure", set.inner_measure);
            self.report.constant("good_set_members", stab.members as f64);
            self.report.at_most(
                "good_set_stability",
                "rate of good-set members leaving B after T",
                stab.violation_rate,
                th.good_set_violation,
            );
        }
        Ok(())
    }

    fn plane_wave_claims(&mut self) -> Result<()> {
        if !(self.on("plane_wave_residual") || self.on("plane_wave_l2")) {
            return Ok(());
        }
        let th = self.cfg.analysis.thresholds;
        let asym = &self.art.asymptote;
        let grid = asym.psi_out_hat.grid;
        let interp = MomentumInterpolator::new(&asym.psi_out_hat, K_OVERSAMPLE);
        let store = &self.art.store;
        let mut diags: Vec<ResidualDiagnostics> = Vec::new();
        let mut outside_total = 0usize;
        for frac in [0.125, 0.25, 0.5, 1.0] {
            let idx = store.manifest.nearest(frac * self.t_final);
            let psi_t = store.load(idx)?;
            let t = psi_t.time;
            let ac = psi_t.sub(&self.art.decomposition.pp_at(t));
            let out_t = asym.free_asymptote(t);
            let (phi1, outside) = local_plane_wave(&interp, t, &grid)?;
            outside_total += outside;
            diags.push(residuals(&ac, &out_t, &phi1)?.diagnostics);
        }
        let mut csv = CsvWriter::create(
            &self.pipe.path("residuals.csv"),
            &["t", "phi2_sup", "phi2_sup_t2", "phi3_weighted_sup", "ac_minus_phi1"],
        )?;
        for d in &diags {
            csv.row(&[
                Cell::Num(d.time),
                Cell::Num(d.phi2_sup),
                Cell::Num(d.phi2_sup_t2),
                Cell::Num(d.phi3_weighted_sup),
                Cell::Num(d.ac_minus_phi1),
            ])?;
        }
        csv.finish()?;
        self.report.constant("phi1_nodes_outside_lattice", outside_total as f64);
        // the ladder {T, 2T, 4T} with 4T = T_final
        let ladder = &diags[1..];
        let (lt, ls): (Vec<f64>, Vec<f64>) = ladder
            .iter()
            .filter(|d| d.phi2_sup > 0.0)
            .map(|d| (d.time.ln(), d.phi2_sup.ln()))
            .unzip();
        if lt.len() >= 2 {
            self.report.constant("phi2_decay_exponent", -slope(&lt, &ls));
        }
        if self.on("plane_wave_residual") {
            let growth = ladder
                .windows(2)
                .map(|w| w[1].phi2_sup_t2 / w[0].phi2_sup_t2)
                .fold(0.0, f64::max);
            self.report.at_most(
                "plane_wave_residual",
                "largest ratio of successive sup|φ2|·t² over {T, 2T, 4T}",
                growth,
                1.0 + th.plane_wave_fluctuation,
            );
        }
        if self.on("plane_wave_l2") {
            let ratio = ladder
                .windows(2)
                .map(|w| w[1].ac_minus_phi1 / w[0].ac_minus_phi1)
                .fold(0.0, f64::max);
            self.report.push(
                "plane_wave_l2",
                "largest ratio of successive ‖ψ_ac,t − φ1‖ over {T, 2T, 4T}; must stay below one",
                ratio,
                1.0,
                ratio < 1.0,
            );
        }
        Ok(())
    }

    fn crossing_claims(&mut self) -> Result<()> {
        if !(self.on("crossing_bound") || self.on("crossing_quadrature")) {
            return Ok(());
        }
        let th = self.cfg.analysis.thresholds;
        let ball = self.cfg.slow_ball()?;
        let store = &self.art.store;
        let first = store
            .manifest
            .times()
            .iter()
            .position(|&t| t >= ball.t_onset - 1e-9)
            .unwrap_or(0);
        let oversample = self
            .cfg
            .ensemble
            .oversample
            .unwrap_or_else(|| default_oversample(store.manifest.dim));
        let flux = crossing_flux(store.stream(first), &ball, oversample)?;
        let p = flux.p_gamma();
        let p_half = flux.p_gamma_thinned(2);
        let escape = escape_fraction(&self.art.ensemble, &ball);
        let margin = binomial_margin(p, escape.ensemble_size);
        let mut csv = CsvWriter::create(&self.pipe.path("crossing.csv"), &["t", "radius", "integrand"])?;
        for (t, f) in flux.times.iter().zip(&flux.integrand) {
            csv.row(&[Cell::Num(*t), Cell::Num(ball.radius(*t)), Cell::Num(*f)])?;
        }
        csv.finish()?;
        self.report.constant("p_gamma", p);
        self.report.constant("p_gamma_half_frames", p_half);
        self.report.constant("escape_fraction", escape.fraction);
        self.report.constant("inside_at_onset", escape.inside_at_onset as f64);
        if self.on("crossing_bound") {
            self.report.at_most(
                "crossing_bound",
                "slow-ball escape fraction against P_γ plus 3σ binomial margin",
                escape.fraction,
                p + margin,
            );
        }
        if self.on("crossing_quadrature") {
            let rel = if p > 0.0 { (p - p_half).abs() / p } else { 0.0 };
            self.report.at_most(
                "crossing_quadrature",
                "relative change of P_γ when the frame density is halved",
                rel,
                th.crossing_quadrature,
            );
        }
        Ok(())
    }

    fn equivariance_claims(&mut self) -> Result<()> {
        if !self.on("equivariance") {
            return Ok(());
        }
        let th = self.cfg.analysis.thresholds;
        let store = &self.art.store;
        let mut worst = 0.0f64;
        let mut rows = Vec::new();
        for (j, frac) in [0.0, 0.5, 1.0].into_iter().enumerate() {
            let psi_t = store.load(store.manifest.nearest(frac * self.t_final))?;
            let r = equivariance_test(
                &self.art.ensemble,
                &psi_t,
                self.art.ensemble.seed.wrapping_add(1 + j as u64),
            )?;
            worst = worst.max(r.ratio());
            rows.push(r);
        }
        let mut csv = CsvWriter::create(
            &self.pipe.path("equivariance.csv"),
            &["t", "samples", "distance", "baseline"],
        )?;
        for r in &rows {
            csv.row(&[
                Cell::Num(r.time),
                Cell::Int(r.samples as i64),
                Cell::Num(r.distance),
                Cell::Num(r.baseline),
            ])?;
        }
        csv.finish()?;
        self.report.at_most(
            "equivariance",
            "largest ratio of W1(ensemble, |ψ_t|²) to the same-N sampling baseline at three times",
            worst,
            th.equivariance_ratio,
        );
        Ok(())
    }

    fn write_tables(&self) -> Result<()> {
        let ens = &self.art.ensemble;
        let d = self.art.store.manifest.dim;
        let axes = ["x", "y", "z"];
        let mut header: Vec<String> = vec!["id".into(), "status".into(), "class".into()];
        header.extend(axes[..d].iter().map(|a| format!("q0_{a}")));
        header.extend(axes[..d].iter().map(|a| format!("vinf_{a}")));
        header.push("cauchy_residual".into());
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut csv = CsvWriter::create(&self.pipe.path("classification.csv"), &header)?;
        for (i, tr) in ens.trajectories.iter().enumerate() {
            let class = match self.classified.class[i] {
                Class::Bound => "bound",
                Class::Scattering => "scattering",
                Class::Undecided => "undecided",
            };
            let mut row = vec![Cell::Int(tr.id as i64), Cell::Text(tr.status.name()), Cell::Text(class)];
            row.extend(tr.q0[..d].iter().map(|x| Cell::Num(*x)));
            let v = self.classified.v_inf[i].unwrap_or([f64::NAN; 3]);
            row.extend(v[..d].iter().map(|x| Cell::Num(*x)));
            row.push(Cell::Num(self.classified.cauchy_residual[i].unwrap_or(f64::NAN)));
            csv.row(&row)?;
        }
        csv.finish()?;
        let ball = self.cfg.slow_ball()?;
        let mut csv = CsvWriter::create(&self.pipe.path("slow_ball.csv"), &["t", "radius", "speed_floor_line"])?;
        for &t in ens.output_times.iter().filter(|&&t| t > 0.0) {
            csv.row(&[
                Cell::Num(t),
                Cell::Num(ball.radius(t)),
                Cell::Num(self.cfg.analysis.speed_floor * t),
            ])?;
        }
        csv.finish()
    }
}

fn write_spectrum_csv(path: &Path, out: &Spectrum, initial: &Spectrum) -> Result<()> {
    let d = out.grid.dim();
    let lattice = out.grid.momentum_lattice();
    let dk = lattice.step;
    let marg = |s: &Spectrum, axis: usize| -> Vec<f64> { s.density().marginal(axis).iter().map(|w| w / dk).collect() };
    let axes = ["x", "y", "z"];
    let mut header = vec!["k".to_string()];
    for a in &axes[..d] {
        header.push(format!("psi_out_hat_sq_{a}"));
        header.push(format!("psi_ac0_hat_sq_{a}"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let cols: Vec<(Vec<f64>, Vec<f64>)> = (0..d).map(|a| (marg(out, a), marg(initial, a))).collect();
    let mut csv = CsvWriter::create(path, &header)?;
    for j in 0..lattice.points {
        let mut row = vec![Cell::Num(lattice.center(j))];
        for (o, i) in &cols {
            row.push(Cell::Num(o[j]));
            row.push(Cell::Num(i[j]));
        }
        csv.row(&row)?;
    }
    csv.finish()
}

fn write_ensemble_csv(path: &Path, ens: &TrajectoryEnsemble, dim: usize, max_trajectories: usize) -> Result<()> {
    let axes = ["x", "y", "z"];
    let mut header: Vec<String> = vec!["id".into(), "status".into(), "t".into()];
    header.extend(axes[..dim].iter().map(|a| format!("q_{a}")));
    header.extend(axes[..dim].iter().map(|a| format!("v_{a}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = CsvWriter::create(path, &header)?;
    for tr in ens.trajectories.iter().take(max_trajectories) {
        for s in &tr.samples {
            let mut row = vec![Cell::Int(tr.id as i64), Cell::Text(tr.status.name()), Cell::Num(s.t)];
            row.extend(s.q[..dim].iter().map(|x| Cell::Num(*x)));
            row.extend(s.v[..dim].iter().map(|x| Cell::Num(*x)));
            csv.row(&row)?;
        }
    }
    csv.finish()
}
