//! Two-stage localization: coarse segmentation on a downsampled grid, crop
//! around each thalamus at full resolution, localize inside the crop.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{argmax_position, HeatmapSpec, Side, TargetPoint};
use crate::predictors::{Localizer, Segmenter, LEFT, RIGHT};
use crate::volume::{Dims, Interpolation, Point3, Volume3, VoxelBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

fn is_set(x: f64) -> bool {
    x > 0.5
}

/// Keeps only the largest connected component of a binary mask. Ties go to
/// the component with the smallest minimum linear index.
pub fn largest_connected_component(mask: &Volume3, connectivity: Connectivity) -> Result<Volume3> {
    let [nx, ny, nz] = mask.dims();
    let data = mask.data();
    let offsets = connectivity.offsets();
    let mut label = vec![0u32; data.len()];
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for seed in 0..data.len() {
        if !is_set(data[seed]) || label[seed] != 0 {
            continue;
        }
        next += 1;
        label[seed] = next;
        stack.push(seed);
        let mut size = 0usize;
        while let Some(idx) = stack.pop() {
            size += 1;
            let [i, j, k] = mask.voxel_of(idx);
            for o in &offsets {
                let (a, b, c) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= nx as i64 || b >= ny as i64 || c >= nz as i64 {
                    continue;
                }
                let n = a as usize + nx * (b as usize + ny * c as usize);
                if is_set(data[n]) && label[n] == 0 {
                    label[n] = next;
                    stack.push(n);
                }
            }
        }
        // components are discovered in order of their minimum linear index
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
    }
    let (keep, _) = best.ok_or_else(|| Error::EmptyComponent("mask has no foreground voxels".into()))?;
    mask.with_data(label.iter().map(|&l| if l == keep { 1.0 } else { 0.0 }).collect())
}

/// Per-axis `floor((min + max) / 2)` of the foreground bounding box.
pub fn bounding_box_center(mask: &Volume3) -> Result<[i64; 3]> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (idx, &x) in mask.data().iter().enumerate() {
        if !is_set(x) {
            continue;
        }
        any = true;
        let p = mask.voxel_of(idx);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !any {
        return Err(Error::EmptyComponent("bounding box of an empty mask".into()));
    }
    Ok([0, 1, 2].map(|a| ((lo[a] + hi[a]) / 2) as i64))
}

/// Maps between whole-volume voxel coordinates and the localizer's input
/// frame (the crop, mirrored along axis 0 for the left side).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropFrame {
    pub side: Side,
    pub crop_box: VoxelBox,
    pub flipped: bool,
}

impl CropFrame {
    pub fn new(side: Side, crop_box: VoxelBox) -> Self {
        Self {
            side,
            crop_box,
            flipped: side == Side::Left,
        }
    }

    pub fn offset(&self) -> [i64; 3] {
        self.crop_box.offset()
    }

    pub fn to_input(&self, p: Point3) -> Point3 {
        let o = self.offset();
        let mut q = [p[0] - o[0] as f64, p[1] - o[1] as f64, p[2] - o[2] as f64];
        if self.flipped {
            q[0] = (self.crop_box.extent[0] - 1) as f64 - q[0];
        }
        q
    }

    pub fn voxel_to_whole(&self, q: [usize; 3]) -> [i64; 3] {
        let o = self.offset();
        let x = if self.flipped {
            self.crop_box.extent[0] - 1 - q[0]
        } else {
            q[0]
        };
        [o[0] + x as i64, o[1] + q[1] as i64, o[2] + q[2] as i64]
    }

    pub fn point_to_whole(&self, q: Point3) -> Point3 {
        let o = self.offset();
        let x = if self.flipped {
            (self.crop_box.extent[0] - 1) as f64 - q[0]
        } else {
            q[0]
        };
        [o[0] as f64 + x, o[1] as f64 + q[1], o[2] as f64 + q[2]]
    }

    /// Crops (and mirrors, for the left side) the localizer input.
    pub fn extract(&self, image: &Volume3) -> Volume3 {
        let crop = image.crop_box(&self.crop_box, 0.0);
        if self.flipped {
            crop.flip_lr()
        } else {
            crop
        }
    }

    /// Brings an input-frame heatmap back to the crop's original orientation.
    pub fn restore(&self, heatmap: &Volume3) -> Volume3 {
        if self.flipped {
            heatmap.flip_lr()
        } else {
            heatmap.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub coarse_dims: Dims,
    pub crop_extent: Dims,
    pub connectivity: Connectivity,
    pub heatmap: HeatmapSpec,
    /// Per-channel binarization threshold for stage-one probabilities.
    pub threshold: f64,
    /// Seed passed to the localizer on deterministic passes.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            coarse_dims: [80, 80, 80],
            crop_extent: [64, 64, 64],
            connectivity: Connectivity::TwentySix,
            heatmap: HeatmapSpec::default(),
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coarse_dims.contains(&0) || self.crop_extent.contains(&0) {
            return Err(Error::invalid_arg("coarse_dims and crop_extent must be positive"));
        }
        self.heatmap.validate()
    }
}

/// Known landmark positions in whole-volume voxel coordinates, passed to
/// localizers as hints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideTargets {
    pub left: Point3,
    pub right: Point3,
}

impl SideTargets {
    pub fn get(&self, side: Side) -> Point3 {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    pub fn from_points(points: &[TargetPoint]) -> Option<Self> {
        let find = |s| points.iter().find(|p| p.side == s).map(|p| p.position);
        Some(Self {
            left: find(Side::Left)?,
            right: find(Side::Right)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub downsample_ms: f64,
    pub segment_ms: f64,
    pub postprocess_ms: f64,
    pub localize_ms: f64,
}

#[derive(Debug, Clone)]
pub struct StageOne {
    pub left: Result<CropFrame, String>,
    pub right: Result<CropFrame, String>,
    /// True when the segmenter's channels were reassigned by position.
    pub labels_swapped: bool,
}

impl StageOne {
    pub fn frame(&self, side: Side) -> Result<CropFrame, &str> {
        match side {
            Side::Left => self.left.as_ref().copied().map_err(|e| e.as_str()),
            Side::Right => self.right.as_ref().copied().map_err(|e| e.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideOutput {
    pub frame: CropFrame,
    pub cropped: Volume3,
    /// Localization heatmap in the crop's original orientation.
    pub heatmap: Volume3,
    pub target: [i64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideResult {
    pub side: Side,
    pub output: Result<SideOutput, String>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub left: SideResult,
    pub right: SideResult,
    pub labels_swapped: bool,
    pub timings: StageTimings,
}

impl PipelineResult {
    pub fn side(&self, side: Side) -> &SideResult {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn target(&self, side: Side) -> Option<[i64; 3]> {
        self.side(side).output.as_ref().ok().map(|o| o.target)
    }

    pub fn summary(&self) -> PipelineSummary {
        let side = |r: &SideResult| SideSummary {
            side: r.side,
            crop_box: r.output.as_ref().ok().map(|o| o.frame.crop_box),
            target: r.output.as_ref().ok().map(|o| o.target),
            error: r.output.as_ref().err().cloned(),
        };
        PipelineSummary {
            sides: vec![side(&self.left), side(&self.right)],
            labels_swapped: self.labels_swapped,
            timings: self.timings.clone(),
        }
    }
}

/// JSON form of a [`PipelineResult`] (no volumes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub sides: Vec<SideSummary>,
    pub labels_swapped: bool,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub side: Side,
    pub crop_box: Option<VoxelBox>,
    pub target: Option<[i64; 3]>,
    pub error: Option<String>,
}

pub struct Pipeline<'a> {
    pub config: PipelineConfig,
    pub segmenter: &'a dyn Segmenter,
    pub localizer: &'a dyn Localizer,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Pipeline<'a> {
    pub fn new(config: PipelineConfig, segmenter: &'a dyn Segmenter, localizer: &'a dyn Localizer) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            segmenter,
            localizer,
        })
    }

    /// Downsample, segment, keep the largest component per foreground
    /// channel, upsample the masks (nearest) and place the crop boxes.
    pub fn stage_one(&self, image: &Volume3, timings: &mut StageTimings) -> Result<StageOne> {
        let t = Instant::now();
        let coarse = image.downsample_to(self.config.coarse_dims)?;
        timings.downsample_ms = ms(t);

        let t = Instant::now();
        let probs = self.segmenter.predict(&coarse)?;
        timings.segment_ms = ms(t);

        let t = Instant::now();
        let centers = [LEFT, RIGHT].map(|ch| self.channel_center(&probs[ch], image.dims()));
        let [mut left, mut right] = centers;
        let mut labels_swapped = false;
        // side assignment follows anatomy: the left structure has the smaller axis-0 center
        if let (Ok(l), Ok(r)) = (&left, &right) {
            if l[0] > r[0] {
                std::mem::swap(&mut left, &mut right);
                labels_swapped = true;
            }
        }
        let frame = |side, c: Result<[i64; 3], String>| -> Result<CropFrame, String> {
            let center = c?;
            Ok(CropFrame::new(side, VoxelBox::new(center, self.config.crop_extent).map_err(|e| e.to_string())?))
        };
        let out = StageOne {
            left: frame(Side::Left, left),
            right: frame(Side::Right, right),
            labels_swapped,
        };
        timings.postprocess_ms = ms(t);
        Ok(out)
    }

    fn channel_center(&self, prob: &Volume3, full_dims: Dims) -> Result<[i64; 3], String> {
        let mask = prob.map(|p| if p >= self.config.threshold { 1.0 } else { 0.0 });
        let component = largest_connected_component(&mask, self.config.connectivity).map_err(|e| e.to_string())?;
        let full = component
            .resample_to(full_dims, Interpolation::Nearest)
            .map_err(|e| e.to_string())?;
        bounding_box_center(&full).map_err(|e| e.to_string())
    }

    /// Localizes one side with a single deterministic pass.
    pub fn localize_side(&self, image: &Volume3, frame: &CropFrame, truth: Option<Point3>) -> Result<SideOutput> {
        let input = frame.extract(image);
        let hint = truth.map(|p| frame.to_input(p));
        let pred = self.localizer.predict(&input, hint, false, self.config.seed)?;
        let peak = argmax_position(&pred)?;
        Ok(SideOutput {
            frame: *frame,
            cropped: frame.restore(&input),
            heatmap: frame.restore(&pred),
            target: frame.voxel_to_whole(peak),
        })
    }

    pub fn run(&self, image: &Volume3, truth: Option<&SideTargets>) -> Result<PipelineResult> {
        let mut timings = StageTimings::default();
        let stage = self.stage_one(image, &mut timings)?;
        let t = Instant::now();
        let run_side = |side: Side| -> SideResult {
            let output = stage.frame(side).map_err(str::to_string).and_then(|frame| {
                self.localize_side(image, &frame, truth.map(|t| t.get(side)))
                    .map_err(|e| e.to_string())
            });
            SideResult { side, output }
        };
        let (left, right) = rayon::join(|| run_side(Side::Left), || run_side(Side::Right));
        timings.localize_ms = ms(t);
        if let (Err(l), Err(r)) = (&left.output, &right.output) {
            return Err(Error::PipelineFailure(format!("left: {l}; right: {r}")));
        }
        Ok(PipelineResult {
            left,
            right,
            labels_swapped: stage.labels_swapped,
            timings,
        })
    }
}
