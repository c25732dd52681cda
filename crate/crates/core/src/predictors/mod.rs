//! Predictor abstractions and their implementations.
//!
//! A [`Localizer`] maps a single-channel volume to a same-shaped heatmap. A
//! [`Segmenter`] maps a volume to three per-voxel probability channels
//! (background, left, right).

mod convnet;
mod oracle;
mod segmenter;

pub use convnet::{deepest_half, inverted_dropout, ConvNet, ConvNetSpec, LayerShape, WeightManifest, WeightSource};
pub use oracle::{EchoLocalizer, OracleLocalizer, OracleLocalizerConfig};
pub use segmenter::{BoundaryNoise, ThresholdSegmenter, TruthSegmenter};

use crate::error::Result;
use crate::volume::{Point3, Volume3};

pub trait Localizer: Send + Sync {
    /// Predicts a heatmap for `input`.
    ///
    /// `truth_hint` is the known landmark position in `input`'s voxel frame
    /// when one exists (synthetic experiments); image-driven models ignore
    /// it. With `stochastic == false` the output depends only on `input`
    /// and `truth_hint`; with `stochastic == true` it is a pure function of
    /// `(input, truth_hint, seed)`.
    fn predict(&self, input: &Volume3, truth_hint: Option<Point3>, stochastic: bool, seed: u64) -> Result<Volume3>;

    fn name(&self) -> &'static str;
}

pub const BACKGROUND: usize = 0;
pub const LEFT: usize = 1;
pub const RIGHT: usize = 2;

pub trait Segmenter: Send + Sync {
    /// Channel probabilities, summing to 1 per voxel.
    fn predict(&self, input: &Volume3) -> Result<[Volume3; 3]>;
}

impl<T: Localizer + ?Sized> Localizer for &T {
    fn predict(&self, input: &Volume3, truth_hint: Option<Point3>, stochastic: bool, seed: u64) -> Result<Volume3> {
        (**self).predict(input, truth_hint, stochastic, seed)
    }

    fn name(&self) -> &'static str {
        (**self).name()
    }
}
