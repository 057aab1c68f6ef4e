//! Touchless palmprint recognition toolkit.
//!
//! - [`gabor`]: straight and curved Gabor templates, the frozen first layer.
//! - [`roi`]: keypoint-driven ROI geometry and the ROI-bias perturbation.
//! - [`dataset`]: manifests, splits and a seeded synthetic palmprint generator.
//! - [`model`]: the 3D convolutional palmprint network, its losses and training.
//! - [`baselines`]: competitive coding and a region-histogram matcher.
//! - [`eval`]: verification protocol, Rank-1, EER, ROC, GAR@FAR, densities.
//! - [`experiments`]: desk-scale ablations and hyperparameter sweeps.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gabor;
pub mod model;
pub mod raster;
pub mod roi;
pub mod train;

pub use error::{CoreError, Result};
pub use raster::Raster;
