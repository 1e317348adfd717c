//! Config-driven experiment runner for Bohmian scattering simulations.
//!
//! A run is described by an [`config::ExperimentConfig`] and executed by a
//! [`pipeline::Pipeline`] whose stages communicate only through files in the
//! run directory (see [`io`] for the formats).

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod scenarios;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use pipeline::{Pipeline, Stage};
pub use scenarios::list_scenarios;
