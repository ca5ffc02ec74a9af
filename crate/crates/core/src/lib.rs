//! Spatially varying coefficient models for volumetric imaging data.
//!
//! The pipeline fits a voxel-wise linear model, estimates the spatial noise
//! structure through local-linear smoothing of residuals and functional
//! principal components, adaptively smooths the coefficient maps over a
//! sequence of growing neighborhoods, and tests linear hypotheses with
//! Wald statistics.

pub mod baselines;
mod conv;
pub mod design;
pub mod error;
pub mod fpca;
pub mod grid;
pub mod infer;
pub mod io;
pub mod lsq;
pub mod mass;
pub mod pipeline;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
