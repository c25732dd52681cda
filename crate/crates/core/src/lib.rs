//! Volumetric two-stage target localization with sampling-based uncertainty.

pub mod error;
pub mod experiment;
pub mod heatmap;
pub mod phantom;
pub mod pipeline;
pub mod predictors;
pub mod seed;
pub mod transforms;
pub mod uncertainty;
pub mod volume;
pub mod volume_io;

pub use error::{Error, Result};
pub use volume::{Dims, Interpolation, Point3, Spacing, Volume3};
