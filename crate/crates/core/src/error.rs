use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("field has {found} values, grid expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("field has zero norm")]
    ZeroNorm,
    #[error("bound state {level} did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        level: usize,
        residual: f64,
        iterations: usize,
    },
    #[error("|ψ| below node threshold at t = {t}")]
    NodeProximity { t: f64 },
    #[error("time {t} outside frame range [{start}, {end}]")]
    OutsideFrames { t: f64, start: f64, end: f64 },
    #[error("{0}")]
    Sink(String),
}
