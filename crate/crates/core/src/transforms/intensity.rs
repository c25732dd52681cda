//! Monotone cubic Bézier intensity curves.
//!
//! The parametric curve `B(t) = (x(t), y(t))` with `P0 = (0,0)` and
//! `P3 = (1,1)` is tabulated at `M` uniform parameter values; the resulting
//! table is used as a piecewise-linear map `x -> y`, and with axes swapped as
//! its inverse.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3;

pub const DEFAULT_LUT_SIZE: usize = 1000;

pub type Point2 = [f64; 2];

/// Strictly increasing piecewise-linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneLut {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl MonotoneLut {
    /// Sorts by x if needed and collapses duplicate x values.
    fn from_pairs(mut pairs: Vec<(f64, f64)>) -> Self {
        if pairs.windows(2).any(|w| w[1].0 < w[0].0) {
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        }
        let last = pairs.len() - 1;
        let mut xs: Vec<f64> = Vec::with_capacity(pairs.len());
        let mut ys: Vec<f64> = Vec::with_capacity(pairs.len());
        for (idx, (x, y)) in pairs.into_iter().enumerate() {
            if xs.last() == Some(&x) {
                // the final group keeps its last entry so the table ends at its endpoint
                if idx == last {
                    *ys.last_mut().unwrap() = y;
                }
                continue;
            }
            xs.push(x);
            ys.push(y);
        }
        Self { xs, ys }
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[f64] {
        &self.ys
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Input is clamped to the table's x range.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 || x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let hi = self.xs.partition_point(|&v| v <= x);
        let lo = hi - 1;
        let (x0, x1) = (self.xs[lo], self.xs[hi]);
        let (y0, y1) = (self.ys[lo], self.ys[hi]);
        let f = (x - x0) / (x1 - x0);
        y0 + f * (y1 - y0)
    }

    pub fn swapped(&self) -> Self {
        Self::from_pairs(self.ys.iter().copied().zip(self.xs.iter().copied()).collect())
    }

    pub fn is_non_decreasing(&self) -> bool {
        self.xs.windows(2).all(|w| w[1] > w[0]) && self.ys.windows(2).all(|w| w[1] >= w[0])
    }
}

/// Control points of an intensity curve, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    pub p1: Point2,
    pub p2: Point2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCurve {
    p1: Point2,
    p2: Point2,
    forward: MonotoneLut,
    inverse: MonotoneLut,
}

impl IntensityCurve {
    pub const P0: Point2 = [0.0, 0.0];
    pub const P3: Point2 = [1.0, 1.0];

    /// Builds the curve with a `M`-entry lookup table. Control points are
    /// reordered so that `p1.x <= p2.x`.
    pub fn with_lut_size(p1: Point2, p2: Point2, m: usize) -> Result<Self> {
        let in_unit = |p: Point2| p.iter().all(|c| (0.0..=1.0).contains(c));
        if !in_unit(p1) || !in_unit(p2) {
            return Err(Error::invalid_arg(format!(
                "control points must lie in [0,1]^2, got {p1:?} {p2:?}"
            )));
        }
        if m < 2 {
            return Err(Error::invalid_arg("lookup table needs at least 2 entries"));
        }
        let (p1, p2) = if p1[0] <= p2[0] { (p1, p2) } else { (p2, p1) };
        let pairs = (0..m)
            .map(|i| {
                let t = i as f64 / (m - 1) as f64;
                let [x, y] = bernstein(p1, p2, t);
                (x, y)
            })
            .collect();
        let forward = MonotoneLut::from_pairs(pairs);
        let inverse = forward.swapped();
        Ok(Self {
            p1,
            p2,
            forward,
            inverse,
        })
    }

    pub fn new(p1: Point2, p2: Point2) -> Result<Self> {
        Self::with_lut_size(p1, p2, DEFAULT_LUT_SIZE)
    }

    pub fn from_params(p: &CurveParams) -> Result<Self> {
        Self::new(p.p1, p.p2)
    }

    pub fn identity() -> Self {
        Self::new([1.0 / 3.0; 2], [2.0 / 3.0; 2]).expect("identity control points are valid")
    }

    pub fn params(&self) -> CurveParams {
        CurveParams {
            p1: self.p1,
            p2: self.p2,
        }
    }

    pub fn p1(&self) -> Point2 {
        self.p1
    }

    pub fn p2(&self) -> Point2 {
        self.p2
    }

    pub fn lut(&self) -> &MonotoneLut {
        &self.forward
    }

    pub fn inverse_lut(&self) -> &MonotoneLut {
        &self.inverse
    }

    /// Exact cubic Bernstein combination of the four control points.
    pub fn eval(&self, t: f64) -> Result<Point2> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid_arg(format!("curve parameter {t} outside [0,1]")));
        }
        Ok(bernstein(self.p1, self.p2, t))
    }

    pub fn apply(&self, u: f64) -> f64 {
        self.forward.eval(u.clamp(0.0, 1.0))
    }

    pub fn apply_inverse(&self, u: f64) -> f64 {
        self.inverse.eval(u.clamp(0.0, 1.0))
    }

    /// Maps every voxel through the curve. Returns the new volume and the
    /// number of voxels that were clamped into `[0, 1]` first.
    pub fn apply_volume(&self, v: &Volume3) -> (Volume3, usize) {
        map_with_lut(&self.forward, v)
    }

    pub fn apply_inverse_volume(&self, v: &Volume3) -> (Volume3, usize) {
        map_with_lut(&self.inverse, v)
    }
}

fn map_with_lut(lut: &MonotoneLut, v: &Volume3) -> (Volume3, usize) {
    let clamped = v.data().par_iter().filter(|&&u| !(0.0..=1.0).contains(&u)).count();
    let out = v.map(|u| lut.eval(u.clamp(0.0, 1.0)));
    (out, clamped)
}

#[inline]
fn bernstein(p1: Point2, p2: Point2, t: f64) -> Point2 {
    let s = 1.0 - t;
    let b1 = 3.0 * s * s * t;
    let b2 = 3.0 * s * t * t;
    let b3 = t * t * t;
    // P0 = (0,0) contributes nothing
    [
        b1 * p1[0] + b2 * p2[0] + b3,
        b1 * p1[1] + b2 * p2[1] + b3,
    ]
}
