//! On-disk formats: the `BFLD` field container, the frames manifest, JSON
//! metadata, the NDJSON trajectory stream and plain CSV tables.
//!
//! `BFLD` layout (all little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `BFLD` |
//! | 4     | `u32` format version |
//! | 4     | `u32` dimension |
//! | 4     | `u32` points per axis |
//! | 8     | `f64` half extent `L` |
//! | 8     | `f64` time |
//! | 4     | `u32` label code |
//! | 16·nᵈ | `f64` (re, im) pairs, row-major, last axis fastest |
//!
//! Momentum-space fields (label `psi_out_hat`) store FFT-ordered values on
//! the dual lattice of the same grid.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use bohmflow_core::field::Spectrum;
use bohmflow_core::propagator::EvolutionLog;
use bohmflow_core::trajectories::{Sample, Status, Trajectory, TrajectoryEnsemble};
use bohmflow_core::{Field, Grid, Label, Potential};
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const BFLD_MAGIC: &[u8; 4] = b"BFLD";
pub const BFLD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8 + 4;

pub const FRAMES_DIR: &str = "frames";
pub const MANIFEST: &str = "frames/manifest.json";
pub const EIGEN_DIR: &str = "eigenstates";
pub const SPLIT: &str = "split.json";
pub const PSI_AC0: &str = "psi_ac0.bfld";
pub const PSI_OUT_HAT: &str = "psi_out_hat.bfld";
pub const ASYMPTOTE: &str = "asymptote.json";
pub const ENSEMBLE: &str = "ensemble.ndjson";
pub const ENSEMBLE_CSV: &str = "ensemble.csv";
pub const ENSEMBLE_SUMMARY: &str = "ensemble_summary.json";
pub const REPORT: &str = "report.json";
pub const SUMMARY_CSV: &str = "summary.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn open(path: &Path, what: &str) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(CliError::MissingArtifact {
            what: format!("missing {what}"),
            path: path.to_path_buf(),
        }),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> CliError {
    CliError::Artifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn encode(grid: &Grid, time: f64, label: Label, values: &[Complex64]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 16 * values.len());
    buf.extend_from_slice(BFLD_MAGIC);
    buf.extend_from_slice(&BFLD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.points() as u32).to_le_bytes());
    buf.extend_from_slice(&grid.half_extent().to_le_bytes());
    buf.extend_from_slice(&time.to_le_bytes());
    buf.extend_from_slice(&label.code().to_le_bytes());
    for z in values {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    buf
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub grid: Grid,
    pub time: f64,
    pub label: Label,
    pub values: Vec<Complex64>,
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Container, String> {
    if bytes.len() < HEADER_LEN {
        return Err("truncated header".into());
    }
    if &bytes[..4] != BFLD_MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != BFLD_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dim = u32_at(8) as usize;
    let n = u32_at(12) as usize;
    let half_extent = f64_at(16);
    let time = f64_at(24);
    let label = Label::from_code(u32_at(32)).ok_or("unknown label code")?;
    let grid = Grid::new(dim, half_extent, n).map_err(|e| e.to_string())?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 16 * grid.len() {
        return Err(format!("expected {} values, found {} bytes", grid.len(), body.len()));
    }
    let values = body
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    Ok(Container {
        grid,
        time,
        label,
        values,
    })
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode(&field.grid, field.time, field.label, &field.values))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn write_spectrum(path: &Path, spec: &Spectrum) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode(&spec.grid, spec.time, Label::PsiOutHat, &spec.values))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn read_container(path: &Path, what: &str) -> Result<Container> {
    let mut bytes = Vec::new();
    open(path, what)?
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|r| malformed(path, r))
}

pub fn read_field(path: &Path, what: &str) -> Result<Field> {
    let c = read_container(path, what)?;
    if c.label == Label::PsiOutHat {
        return Err(malformed(path, "momentum-space container where a field was expected"));
    }
    Ok(Field::new(c.grid, c.values, c.time, c.label)?)
}

pub fn read_spectrum(path: &Path, what: &str) -> Result<Spectrum> {
    let c = read_container(path, what)?;
    if c.label != Label::PsiOutHat {
        return Err(malformed(path, format!("label {} is not psi_out_hat", c.label.name())));
    }
    Ok(Spectrum {
        grid: c.grid,
        values: c.values,
        time: c.time,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(std::io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    serde_json::from_reader(open(path, what)?).map_err(|e| malformed(path, e.to_string()))
}

/// Frames directory index written by `propagate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesManifest {
    pub schema_version: u32,
    pub scenario: String,
    pub dim: usize,
    pub points: usize,
    pub half_extent: f64,
    pub dt: f64,
    pub frame_stride: usize,
    pub potential: Potential,
    /// Paths relative to the frames directory, one per retained frame.
    pub files: Vec<String>,
    #[serde(flatten)]
    pub log: EvolutionLog,
}

impl FramesManifest {
    pub fn grid(&self) -> Result<Grid> {
        Ok(Grid::new(self.dim, self.half_extent, self.points)?)
    }

    pub fn times(&self) -> &[f64] {
        &self.log.times
    }

    /// Index of the frame closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let times = self.times();
        (0..times.len())
            .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
            .unwrap_or(0)
    }
}

/// Reads frames lazily, one file at a time.
#[derive(Debug, Clone)]
pub struct FrameStore {
    pub dir: PathBuf,
    pub manifest: FramesManifest,
}

impl FrameStore {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        let manifest: FramesManifest = read_json(&path, "frames manifest")?;
        if manifest.files.len() != manifest.log.times.len() || manifest.files.is_empty() {
            return Err(malformed(&path, "file list and time list disagree"));
        }
        Ok(Self {
            dir: run_dir.join(FRAMES_DIR),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.files.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Field> {
        read_field(&self.dir.join(&self.manifest.files[index]), "frame")
    }

    /// Frames `from..` in order, errors converted for the core streaming APIs.
    pub fn stream(&self, from: usize) -> impl Iterator<Item = std::result::Result<Field, bohmflow_core::Error>> + '_ {
        (from..self.len()).map(move |i| self.load(i).map_err(|e| bohmflow_core::Error::Sink(e.to_string())))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.bfld")
}

/// One NDJSON line: `{id, q0, status, samples: [[t, Q…, v…], …]}` with
/// non-finite numbers written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryLine {
    id: usize,
    q0: Vec<f64>,
    status: Status,
    samples: Vec<Vec<Option<f64>>>,
    accepted_steps: usize,
    rejected_steps: usize,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl TrajectoryLine {
    fn from_trajectory(t: &Trajectory, dim: usize) -> Self {
        Self {
            id: t.id,
            q0: t.q0[..dim].to_vec(),
            status: t.status,
            samples: t
                .samples
                .iter()
                .map(|s| {
                    std::iter::once(s.t)
                        .chain(s.q[..dim].iter().copied())
                        .chain(s.v[..dim].iter().copied())
                        .map(finite)
                        .collect()
                })
                .collect(),
            accepted_steps: t.accepted_steps,
            rejected_steps: t.rejected_steps,
        }
    }

    fn into_trajectory(self, dim: usize) -> std::result::Result<Trajectory, String> {
        if self.q0.len() != dim {
            return Err(format!("trajectory {} has {} coordinates", self.id, self.q0.len()));
        }
        let mut q0 = [0.0; 3];
        q0[..dim].copy_from_slice(&self.q0);
        let samples = self
            .samples
            .into_iter()
            .map(|row| {
                if row.len() != 1 + 2 * dim {
                    return Err(format!("trajectory {} has a sample of width {}", self.id, row.len()));
                }
                let get = |i: usize| row[i].unwrap_or(f64::NAN);
                let mut s = Sample {
                    t: get(0),
                    q: [0.0; 3],
                    v: [0.0; 3],
                };
                for a in 0..dim {
                    s.q[a] = get(1 + a);
                    s.v[a] = get(1 + dim + a);
                }
                Ok(s)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Trajectory {
            id: self.id,
            q0,
            status: self.status,
            samples,
            accepted_steps: self.accepted_steps,
            rejected_steps: self.rejected_steps,
        })
    }
}

pub fn write_ensemble_ndjson(path: &Path, ens: &TrajectoryEnsemble, dim: usize) -> Result<()> {
    let mut w = create(path)?;
    for t in &ens.trajectories {
        serde_json::to_writer(&mut w, &TrajectoryLine::from_trajectory(t, dim))
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_ensemble_ndjson(path: &Path, dim: usize) -> Result<Vec<Trajectory>> {
    let reader = open(path, "trajectory ensemble")?;
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| malformed(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec.into_trajectory(dim).map_err(|r| malformed(path, r))?);
    }
    Ok(out)
}

/// Minimal CSV writer for numeric tables.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = Self {
            path: path.to_path_buf(),
            out: create(path)?,
        };
        w.line(&header.join(","))?;
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| CliError::io(&self.path, e))
    }

    /// Writes one row; non-finite numbers become empty cells.
    pub fn row(&mut self, cells: &[Cell]) -> Result<()> {
        let s: Vec<String> = cells.iter().map(Cell::render).collect();
        self.line(&s.join(","))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub enum Cell<'a> {
    Num(f64),
    Int(i64),
    Text(&'a str),
}

impl Cell<'_> {
    fn render(&self) -> String {
        match self {
            Cell::Num(x) if x.is_finite() => format!("{x}"),
            Cell::Num(_) => String::new(),
            Cell::Int(i) => i.to_string(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => (*s).to_string(),
        }
    }
}
