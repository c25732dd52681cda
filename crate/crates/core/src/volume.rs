//! Dense 3D scalar volumes.
//!
//! Voxel `(i, j, k)` sits at physical position `(i·s0, j·s1, k·s2)` in
//! millimetres and is stored at linear index `i + d0·(j + d1·k)`
//! (x-fastest). Axis 0 runs from anatomical left to right.
//!
//! Every operation is a pure function returning a new volume.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];
pub type Point3 = [f64; 3];

/// Orientation tag for axis 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum AxisConvention {
    /// Axis 0 increases from anatomical left to right.
    #[default]
    #[serde(rename = "LR")]
    LeftToRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: Dims,
    spacing: Spacing,
    axis_convention: AxisConvention,
    data: Vec<f64>,
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid_arg(format!("dims must be positive, got {dims:?}")));
    }
    Ok(())
}

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid_arg(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume3 {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::invalid_arg(format!(
                "data length {} does not match dims {dims:?} ({expected} voxels)",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            axis_convention: AxisConvention::LeftToRight,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f64) -> Result<Self> {
        check_dims(dims)?;
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::filled(dims, spacing, 0.0)
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn<F>(dims: Dims, spacing: Spacing, f: F) -> Result<Self>
    where
        F: Fn(usize, usize, usize) -> f64 + Sync,
    {
        check_dims(dims)?;
        check_spacing(spacing)?;
        let [nx, ny, _] = dims;
        let mut data = vec![0.0; dims[0] * dims[1] * dims[2]];
        data.par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(k, slice)| {
                for j in 0..ny {
                    for i in 0..nx {
                        slice[i + nx * j] = f(i, j, k);
                    }
                }
            });
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn axis_convention(&self) -> AxisConvention {
        self.axis_convention
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_of(&self, linear: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.linear_index(i, j, k)]
    }

    /// Value at a signed voxel index, or `None` outside the grid.
    pub fn get_checked(&self, idx: [i64; 3]) -> Option<f64> {
        let mut u = [0usize; 3];
        for a in 0..3 {
            if idx[a] < 0 || idx[a] >= self.dims[a] as i64 {
                return None;
            }
            u[a] = idx[a] as usize;
        }
        Some(self.get(u[0], u[1], u[2]))
    }

    /// Volume center in voxel coordinates, `(dims - 1) / 2`.
    pub fn center(&self) -> Point3 {
        [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ]
    }

    pub fn contains_point(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= 0.0 && p[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }

    /// Same grid, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    pub fn map<F: Fn(f64) -> f64 + Sync>(&self, f: F) -> Self {
        Self {
            data: self.data.par_iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    pub fn same_grid(&self, other: &Volume3) -> bool {
        self.dims == other.dims
    }

    /// Trilinear sample at a continuous voxel coordinate. Coordinates outside
    /// the grid are clamped to the nearest edge voxel.
    #[inline]
    pub fn sample_trilinear(&self, p: Point3) -> f64 {
        let [nx, ny, nz] = self.dims;
        let (i0, i1, fx) = axis_cell(p[0], nx);
        let (j0, j1, fy) = axis_cell(p[1], ny);
        let (k0, k1, fz) = axis_cell(p[2], nz);
        let d = &self.data;
        let row = |j: usize, k: usize| nx * (j + ny * k);
        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
        let r00 = row(j0, k0);
        let r10 = row(j1, k0);
        let r01 = row(j0, k1);
        let r11 = row(j1, k1);
        let c00 = lerp(d[r00 + i0], d[r00 + i1], fx);
        let c10 = lerp(d[r10 + i0], d[r10 + i1], fx);
        let c01 = lerp(d[r01 + i0], d[r01 + i1], fx);
        let c11 = lerp(d[r11 + i0], d[r11 + i1], fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        lerp(c0, c1, fz)
    }

    /// Nearest-voxel sample with edge clamping.
    #[inline]
    pub fn sample_nearest(&self, p: Point3) -> f64 {
        let idx = |x: f64, n: usize| -> usize { x.round().clamp(0.0, (n - 1) as f64) as usize };
        self.get(
            idx(p[0], self.dims[0]),
            idx(p[1], self.dims[1]),
            idx(p[2], self.dims[2]),
        )
    }

    #[inline]
    pub fn sample(&self, p: Point3, interp: Interpolation) -> f64 {
        match interp {
            Interpolation::Trilinear => self.sample_trilinear(p),
            Interpolation::Nearest => self.sample_nearest(p),
        }
    }

    /// Resamples onto an isotropic grid with spacing `target_spacing` mm.
    ///
    /// Output dims are `round(dims·spacing / t)` (at least 1 per axis).
    pub fn resample_isotropic(&self, target_spacing: f64) -> Result<Self> {
        if !(target_spacing > 0.0) || !target_spacing.is_finite() {
            return Err(Error::invalid_arg(format!(
                "target spacing must be positive, got {target_spacing}"
            )));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let n = (self.dims[a] as f64 * self.spacing[a] / target_spacing).round();
            dims[a] = (n as usize).max(1);
        }
        let scale = [
            target_spacing / self.spacing[0],
            target_spacing / self.spacing[1],
            target_spacing / self.spacing[2],
        ];
        self.resample_grid(dims, [target_spacing; 3], scale, Interpolation::Trilinear)
    }

    /// Resamples onto exactly `dims` voxels covering the same physical
    /// extent; source index = output index · (old dims / new dims).
    pub fn resample_to(&self, dims: Dims, interp: Interpolation) -> Result<Self> {
        check_dims(dims)?;
        let mut spacing = [0.0; 3];
        let mut scale = [0.0; 3];
        for a in 0..3 {
            scale[a] = self.dims[a] as f64 / dims[a] as f64;
            spacing[a] = self.spacing[a] * scale[a];
        }
        self.resample_grid(dims, spacing, scale, interp)
    }

    /// Trilinear resample onto a `dims` grid. Used for the coarse stage.
    pub fn downsample_to(&self, dims: Dims) -> Result<Self> {
        self.resample_to(dims, Interpolation::Trilinear)
    }

    fn resample_grid(
        &self,
        dims: Dims,
        spacing: Spacing,
        scale: [f64; 3],
        interp: Interpolation,
    ) -> Result<Self> {
        Volume3::from_fn(dims, spacing, |i, j, k| {
            self.sample(
                [i as f64 * scale[0], j as f64 * scale[1], k as f64 * scale[2]],
                interp,
            )
        })
    }

    /// Affine rescale of intensities onto `[0, 1]`. Constant volumes map to
    /// all zeros.
    pub fn rescale_intensity(&self) -> Self {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        if !(range > 0.0) || !range.is_finite() {
            return self.map(|_| 0.0);
        }
        self.map(|x| ((x - lo) / range).clamp(0.0, 1.0))
    }

    /// Extracts `box.extent` voxels around `box.center`. Output voxel `q`
    /// reads input voxel `center - extent/2 + q` (integer division); reads
    /// outside the input return `pad_value`.
    pub fn crop_box(&self, bx: &VoxelBox, pad_value: f64) -> Self {
        let offset = bx.offset();
        let [ex, ey, ez] = bx.extent;
        let mut data = vec![pad_value; ex * ey * ez];
        data.par_chunks_mut(ex * ey).enumerate().for_each(|(qk, slice)| {
            let k = offset[2] + qk as i64;
            if k < 0 || k >= self.dims[2] as i64 {
                return;
            }
            for qj in 0..ey {
                let j = offset[1] + qj as i64;
                if j < 0 || j >= self.dims[1] as i64 {
                    continue;
                }
                for qi in 0..ex {
                    let i = offset[0] + qi as i64;
                    if i < 0 || i >= self.dims[0] as i64 {
                        continue;
                    }
                    slice[qi + ex * qj] = self.get(i as usize, j as usize, k as usize);
                }
            }
        });
        Self {
            dims: bx.extent,
            spacing: self.spacing,
            axis_convention: self.axis_convention,
            data,
        }
    }

    /// Mirrors axis 0: index `i` maps to `dims[0] - 1 - i`.
    pub fn flip_lr(&self) -> Self {
        let nx = self.dims[0];
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(nx) {
            data.extend(row.iter().rev());
        }
        Self {
            data,
            ..self.clone()
        }
    }

    /// Linear index of the maximum, ties to the smallest index; NaNs are skipped.
    pub fn argmax_linear(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (idx, &x) in self.data.iter().enumerate() {
            if x.is_nan() {
                continue;
            }
            match best {
                Some((_, b)) if x <= b => {}
                _ => best = Some((idx, x)),
            }
        }
        best.map(|(idx, _)| idx)
    }

    pub fn max_abs_diff(&self, other: &Volume3) -> Result<f64> {
        if !self.same_grid(other) {
            return Err(Error::invalid_arg(format!(
                "dims mismatch: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0.0).count()
    }
}

#[inline]
fn axis_cell(x: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, max) };
    let i0 = x.floor();
    let f = x - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f)
}

/// Axis-aligned crop region in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelBox {
    pub center: [i64; 3],
    pub extent: [usize; 3],
}

impl VoxelBox {
    pub fn new(center: [i64; 3], extent: [usize; 3]) -> Result<Self> {
        check_dims(extent)?;
        Ok(Self { center, extent })
    }

    /// Input voxel index that lands at output voxel 0.
    pub fn offset(&self) -> [i64; 3] {
        [
            self.center[0] - (self.extent[0] / 2) as i64,
            self.center[1] - (self.extent[1] / 2) as i64,
            self.center[2] - (self.extent[2] / 2) as i64,
        ]
    }
}
