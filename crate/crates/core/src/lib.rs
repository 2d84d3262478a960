//! Learned traversal-time and energy costs for ground robots.
//!
//! The crate turns a geo-referenced environment (orthophoto, height map and
//! terrain-class map) into per-segment predictions of average power and
//! velocity with a small residual CNN, aggregates them into path-level
//! energy and time, and evaluates the model against a synthetic physics
//! oracle.
//!
//! Module map:
//! - [`env`]: rasters, geo-transforms and the three-layer environment.
//! - [`synth`]: synthetic terrain, the robot dynamics oracle and trajectory logs.
//! - [`path`]: paths and unit-length segmentation.
//! - [`patch`]: heading-aligned patch extraction and labeled datasets.
//! - [`nn`]: tensor kernels, the residual regression network and training.
//! - [`cost`]: path costs, directional cost grids and planning.
//! - [`eval`]: metrics, ablation and baselines.

pub mod cost;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod patch;
pub mod path;
pub mod rng;
pub mod synth;
pub mod textfmt;

pub use error::{Error, Result};

/// Anything that maps patches to `(w_hat, v_hat)` in physical units.
pub trait Predictor {
    fn predict(&self, patches: &[patch::Patch]) -> Result<Vec<(f64, f64)>>;
}
