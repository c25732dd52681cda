//! Gaussian target maps, argmax decoding, and the regression / overlap losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Point3, Spacing, Volume3};

/// Default weight for foreground voxels in [`wmse`].
pub const DEFAULT_FG_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSpec {
    /// Standard deviation in mm.
    pub sigma: f64,
    /// Values strictly below this are stored as 0.
    pub cutoff: f64,
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        Self {
            sigma: 1.5,
            cutoff: 0.05,
        }
    }
}

impl HeatmapSpec {
    pub const PEAK: f64 = 1.0;

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid_arg(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(0.0..Self::PEAK).contains(&self.cutoff) {
            return Err(Error::invalid_arg(format!(
                "cutoff must lie in [0, 1), got {}",
                self.cutoff
            )));
        }
        Ok(())
    }

    /// Radius in mm beyond which the map is zero: `sigma * sqrt(2 ln(1/cutoff))`.
    pub fn support_radius(&self) -> f64 {
        if self.cutoff <= 0.0 {
            f64::INFINITY
        } else {
            self.sigma * (2.0 * (1.0 / self.cutoff).ln()).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Side::Left),
            "right" => Ok(Side::Right),
            other => Err(Error::invalid_arg(format!("unknown side {other:?}"))),
        }
    }
}

/// A landmark in voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetPoint {
    pub position: Point3,
    pub side: Side,
}

impl TargetPoint {
    pub fn new(position: Point3, side: Side) -> Result<Self> {
        if position.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid_arg("target position must be finite"));
        }
        Ok(Self { position, side })
    }

    pub fn rounded(&self) -> [i64; 3] {
        self.position.map(|x| x.round() as i64)
    }
}

/// Truncated isotropic Gaussian (in mm) centered at `center`, peak 1.
pub fn gaussian_heatmap(spec: &HeatmapSpec, center: Point3, dims: Dims, spacing: Spacing) -> Result<Volume3> {
    spec.validate()?;
    let mut v = Volume3::zeros(dims, spacing)?;
    if center.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid_arg("heatmap center must be finite"));
    }
    let radius = spec.support_radius();
    let inv_two_var = 1.0 / (2.0 * spec.sigma * spec.sigma);
    // voxel range that can hold non-zero values
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let r = radius / spacing[a];
        let l = (center[a] - r).floor().max(0.0);
        let h = (center[a] + r).ceil().min((dims[a] - 1) as f64);
        if !(l <= h) {
            return Ok(v);
        }
        lo[a] = l as usize;
        hi[a] = h as usize;
    }
    let [nx, ny, _] = dims;
    let data = v.data_mut();
    for k in lo[2]..=hi[2] {
        let dz = (k as f64 - center[2]) * spacing[2];
        for j in lo[1]..=hi[1] {
            let dy = (j as f64 - center[1]) * spacing[1];
            for i in lo[0]..=hi[0] {
                let dx = (i as f64 - center[0]) * spacing[0];
                let val = (-(dx * dx + dy * dy + dz * dz) * inv_two_var).exp();
                if val >= spec.cutoff {
                    data[i + nx * (j + ny * k)] = val;
                }
            }
        }
    }
    Ok(v)
}

/// Voxel index of the maximum; ties go to the smallest x-fastest linear index.
pub fn argmax_position(h: &Volume3) -> Result<[usize; 3]> {
    h.argmax_linear()
        .map(|idx| h.voxel_of(idx))
        .ok_or_else(|| Error::InvalidData("argmax of an all-NaN volume".into()))
}

/// Weighted mean squared error and its gradient with respect to `pred`.
///
/// Voxels with `gt > 0` get weight `fg_weight`, all others weight 1.
pub fn wmse(pred: &Volume3, gt: &Volume3, fg_weight: f64) -> Result<(f64, Volume3)> {
    if !pred.same_grid(gt) {
        return Err(Error::invalid_arg(format!(
            "dims mismatch: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    if !(fg_weight >= 1.0) {
        return Err(Error::invalid_arg(format!("fg_weight must be >= 1, got {fg_weight}")));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| {
            let w = if g > 0.0 { fg_weight } else { 1.0 };
            let d = p - g;
            loss += w * d * d;
            2.0 * w * d / n
        })
        .collect();
    Ok((loss / n, pred.with_data(grad)?))
}

fn check_pair(a: &Volume3, b: &Volume3) -> Result<()> {
    if !a.same_grid(b) {
        return Err(Error::invalid_arg(format!(
            "dims mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `2|a ∩ b| / (|a| + |b|)` on binary masks; 1 when both are empty.
pub fn dice_score(a: &Volume3, b: &Volume3) -> Result<f64> {
    check_pair(a, b)?;
    let binary = |v: &Volume3| v.data().iter().all(|&x| x == 0.0 || x == 1.0);
    if !binary(a) || !binary(b) {
        return Err(Error::invalid_arg("dice_score expects binary masks"));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x == 1.0, y == 1.0);
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Soft Dice loss `1 - 2Σpg / (Σp + Σg)` and its gradient with respect to `pred`.
pub fn soft_dice_loss(pred: &Volume3, gt: &Volume3) -> Result<(f64, Volume3)> {
    check_pair(pred, gt)?;
    let (mut inter, mut denom) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += p * g;
        denom += p + g;
    }
    if denom == 0.0 {
        return Ok((0.0, pred.map(|_| 0.0)));
    }
    let loss = 1.0 - 2.0 * inter / denom;
    let d2 = denom * denom;
    let grad = gt
        .data()
        .iter()
        .map(|&g| -2.0 * (g * denom - inter) / d2)
        .collect();
    Ok((loss, pred.with_data(grad)?))
}
