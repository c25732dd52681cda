//! Image acquisition model: rigid spatial transforms, Bézier intensity
//! curves and the uniform priors they are drawn from.

mod intensity;
mod rigid;

pub use intensity::{CurveParams, IntensityCurve, MonotoneLut, Point2, DEFAULT_LUT_SIZE};
pub use rigid::{RigidParams, RigidTransform};

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::Point3;

/// Uniform priors over augmentation parameters. Ranges are closed intervals;
/// a zero-width range pins the parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformPriors {
    /// Per-axis translation in voxels.
    pub translation: (f64, f64),
    /// Rotation angle in degrees about a uniformly random axis.
    pub rotation_deg: (f64, f64),
    /// Range for each coordinate of the control points `P1`, `P2`; `None`
    /// keeps the intensity curve at identity.
    pub curve_controls: Option<(f64, f64)>,
}

impl Default for TransformPriors {
    fn default() -> Self {
        Self {
            translation: (-10.0, 10.0),
            rotation_deg: (-20.0, 20.0),
            curve_controls: Some((0.0, 1.0)),
        }
    }
}

impl TransformPriors {
    pub fn identity() -> Self {
        Self {
            translation: (0.0, 0.0),
            rotation_deg: (0.0, 0.0),
            curve_controls: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.translation) || !ok(self.rotation_deg) {
            return Err(Error::invalid_arg("prior ranges must be finite with lo <= hi"));
        }
        if let Some(r) = self.curve_controls {
            if !ok(r) || r.0 < 0.0 || r.1 > 1.0 {
                return Err(Error::invalid_arg("curve control range must lie within [0,1]"));
            }
        }
        Ok(())
    }
}

/// Serialized form of one sampled augmentation, for logging and replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub axis: Point3,
    pub angle_deg: f64,
    pub translation: Point3,
    pub curve: CurveParams,
}

impl AugmentationRecord {
    pub fn new(tf: &RigidTransform, curve: &IntensityCurve) -> Self {
        let p = tf.params();
        Self {
            axis: p.axis,
            angle_deg: p.angle_deg,
            translation: p.translation,
            curve: curve.params(),
        }
    }

    pub fn replay(&self, pivot: Point3) -> Result<(RigidTransform, IntensityCurve)> {
        let tf = RigidTransform::new(self.axis, self.angle_deg, self.translation, pivot)?;
        Ok((tf, IntensityCurve::from_params(&self.curve)?))
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a rigid transform about `pivot` and an intensity curve. The result
/// is a pure function of `(priors, seed, pivot)`.
pub fn sample_transform(
    priors: &TransformPriors,
    seed: u64,
    pivot: Point3,
) -> Result<(RigidTransform, IntensityCurve)> {
    priors.validate()?;
    let mut rng = seed::rng(seed);
    let translation = [
        uniform(&mut rng, priors.translation),
        uniform(&mut rng, priors.translation),
        uniform(&mut rng, priors.translation),
    ];
    let axis: [f64; 3] = UnitSphere.sample(&mut rng);
    let angle = uniform(&mut rng, priors.rotation_deg);
    let tf = RigidTransform::new(axis, angle, translation, pivot)?;
    let curve = match priors.curve_controls {
        None => IntensityCurve::identity(),
        Some(range) => {
            let p1 = [uniform(&mut rng, range), uniform(&mut rng, range)];
            let p2 = [uniform(&mut rng, range), uniform(&mut rng, range)];
            IntensityCurve::new(p1, p2)?
        }
    };
    Ok((tf, curve))
}
