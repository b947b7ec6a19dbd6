//! Semiparametric density ratio models for several samples: estimation,
//! asymptotic inference, density-based regression and goodness-of-fit.

pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod inference;
pub mod model;
pub mod persist;
pub mod regression;
pub mod simulation;

pub use error::{DrmError, Result};
pub use estimation::{fit, FitOptions, FittedModel};
pub use model::{Group, ModelParams, Observation, SampleSet};
