//! Sampling-based uncertainty: Monte Carlo dropout, test-time augmentation,
//! their combination, and the maximum activation dispersion (MAD) score.

mod stats;

pub use stats::{quantile_sorted, rejection_stats, BoxplotStats};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::argmax_position;
use crate::predictors::Localizer;
use crate::seed;
use crate::transforms::{sample_transform, AugmentationRecord, TransformPriors};
use crate::volume::{Interpolation, Point3, Volume3};
use crate::volume_io::write_volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum McMode {
    Mcdo,
    Tta,
    Hybrid,
}

impl McMode {
    pub fn as_str(self) -> &'static str {
        match self {
            McMode::Mcdo => "mcdo",
            McMode::Tta => "tta",
            McMode::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub mode: McMode,
    pub n_samples: usize,
    pub priors: TransformPriors,
    pub base_seed: u64,
    /// Retain every sample heatmap in the summary.
    pub keep_samples: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            mode: McMode::Mcdo,
            n_samples: 100,
            priors: TransformPriors::default(),
            base_seed: 0,
            keep_samples: true,
        }
    }
}

impl McConfig {
    pub fn new(mode: McMode, n_samples: usize, base_seed: u64) -> Self {
        Self {
            mode,
            n_samples,
            base_seed,
            ..Default::default()
        }
    }

    fn validate(&self, expected: McMode) -> Result<()> {
        if self.mode != expected {
            return Err(Error::invalid_arg(format!(
                "config mode {} used for a {} run",
                self.mode.as_str(),
                expected.as_str()
            )));
        }
        if self.n_samples < 2 {
            return Err(Error::invalid_arg(format!("n_samples must be >= 2, got {}", self.n_samples)));
        }
        self.priors.validate()
    }

    fn sample_seed(&self, n: usize) -> u64 {
        self.base_seed.wrapping_add(n as u64)
    }
}

/// Streaming mean / population variance, shifted by the first sample so
/// that identical samples give exactly zero variance.
struct StackAccumulator {
    reference: Volume3,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: usize,
}

impl StackAccumulator {
    fn new(first: &Volume3) -> Self {
        let n = first.len();
        Self {
            reference: first.clone(),
            sum: vec![0.0; n],
            sum_sq: vec![0.0; n],
            count: 0,
        }
    }

    fn push(&mut self, v: &Volume3) -> Result<()> {
        if !v.same_grid(&self.reference) {
            return Err(Error::invalid_arg(format!(
                "sample dims {:?} differ from {:?}",
                v.dims(),
                self.reference.dims()
            )));
        }
        for ((s, q), (&x, &r)) in self
            .sum
            .iter_mut()
            .zip(self.sum_sq.iter_mut())
            .zip(v.data().iter().zip(self.reference.data()))
        {
            let d = x - r;
            *s += d;
            *q += d * d;
        }
        self.count += 1;
        Ok(())
    }

    /// `mean = (1/N)Σy`, `var = (1/N)Σy² − mean²`, evaluated on shifted values.
    fn finish(self) -> Result<(Volume3, Volume3)> {
        let n = self.count as f64;
        let mut mean = Vec::with_capacity(self.sum.len());
        let mut var = Vec::with_capacity(self.sum.len());
        for ((&s, &q), &r) in self.sum.iter().zip(&self.sum_sq).zip(self.reference.data()) {
            let m = s / n;
            mean.push(r + m);
            var.push((q / n - m * m).max(0.0));
        }
        Ok((self.reference.with_data(mean)?, self.reference.with_data(var)?))
    }
}

/// Voxelwise predictive mean and population variance of a sample stack.
pub fn mean_variance(samples: &[Volume3]) -> Result<(Volume3, Volume3)> {
    if samples.len() < 2 {
        return Err(Error::invalid_arg(format!("need at least 2 samples, got {}", samples.len())));
    }
    let mut acc = StackAccumulator::new(&samples[0]);
    for s in samples {
        acc.push(s)?;
    }
    acc.finish()
}

pub fn centroid(positions: &[Point3]) -> Result<Point3> {
    if positions.is_empty() {
        return Err(Error::invalid_arg("centroid of an empty position set"));
    }
    let n = positions.len() as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    Ok(c.map(|x| x / n))
}

/// Maximum activation dispersion: mean Euclidean distance of the positions
/// from their centroid.
pub fn mad(positions: &[Point3]) -> Result<f64> {
    let c = centroid(positions)?;
    let total: f64 = positions
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .sum();
    Ok(total / positions.len() as f64)
}

#[derive(Debug, Clone)]
pub struct UncertaintySummary {
    pub mode: McMode,
    /// Empty unless the run kept its samples.
    pub sample_heatmaps: Vec<Volume3>,
    pub mean_map: Volume3,
    pub variance_map: Volume3,
    pub argmax_positions: Vec<[usize; 3]>,
    pub centroid: Point3,
    pub mad: f64,
    /// Argmax of the mean map.
    pub final_target: [usize; 3],
    /// Sampled augmentations (TTA and hybrid runs).
    pub augmentations: Vec<AugmentationRecord>,
    /// Voxels clamped into [0,1] by the intensity transforms.
    pub clamped_voxels: usize,
}

/// Scalar part of an [`UncertaintySummary`], as exported to JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub mode: McMode,
    pub n_samples: usize,
    pub argmax_positions: Vec<[usize; 3]>,
    pub centroid: Point3,
    pub mad: f64,
    pub final_target: [usize; 3],
    pub augmentations: Vec<AugmentationRecord>,
    pub clamped_voxels: usize,
}

impl UncertaintySummary {
    pub fn positions(&self) -> Vec<Point3> {
        self.argmax_positions.iter().map(|p| p.map(|x| x as f64)).collect()
    }

    pub fn record(&self) -> SummaryRecord {
        SummaryRecord {
            mode: self.mode,
            n_samples: self.argmax_positions.len(),
            argmax_positions: self.argmax_positions.clone(),
            centroid: self.centroid,
            mad: self.mad,
            final_target: self.final_target,
            augmentations: self.augmentations.clone(),
            clamped_voxels: self.clamped_voxels,
        }
    }

    /// Writes `<stem>.summary.json` plus `<stem>_mean` / `<stem>_variance` volumes.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.summary.json"));
        std::fs::write(&json, serde_json::to_vec_pretty(&self.record())?).map_err(|e| Error::io(&json, e))?;
        write_volume(&self.mean_map, &dir.join(format!("{stem}_mean")))?;
        write_volume(&self.variance_map, &dir.join(format!("{stem}_variance")))?;
        Ok(())
    }
}

struct Sample {
    heatmap: Volume3,
    augmentation: Option<AugmentationRecord>,
    clamped: usize,
}

/// Draws `n` samples in parallel batches and folds them in index order, so
/// the result does not depend on scheduling.
fn aggregate<F>(mode: McMode, n: usize, keep: bool, draw: F) -> Result<UncertaintySummary>
where
    F: Fn(usize) -> Result<Sample> + Sync,
{
    let batch = (rayon::current_num_threads() * 2).max(4);
    let mut acc: Option<StackAccumulator> = None;
    let mut kept = Vec::new();
    let mut positions = Vec::with_capacity(n);
    let mut augmentations = Vec::new();
    let mut clamped = 0;
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let samples: Vec<Result<Sample>> = (start..end).into_par_iter().map(&draw).collect();
        for (offset, s) in samples.into_iter().enumerate() {
            let index = start + offset;
            let s = s.map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })?;
            positions.push(argmax_position(&s.heatmap).map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })?);
            acc.get_or_insert_with(|| StackAccumulator::new(&s.heatmap)).push(&s.heatmap)?;
            augmentations.extend(s.augmentation);
            clamped += s.clamped;
            if keep {
                kept.push(s.heatmap);
            }
        }
    }
    let (mean_map, variance_map) = acc.expect("n_samples >= 2").finish()?;
    let points: Vec<Point3> = positions.iter().map(|p| p.map(|x| x as f64)).collect();
    let final_target = argmax_position(&mean_map)?;
    Ok(UncertaintySummary {
        mode,
        sample_heatmaps: kept,
        mean_map,
        variance_map,
        argmax_positions: positions,
        centroid: centroid(&points)?,
        mad: mad(&points)?,
        final_target,
        augmentations,
        clamped_voxels: clamped,
    })
}

/// `T` stochastic passes on the untransformed input, seeds `base_seed + t`.
pub fn run_mcdo(loc: &dyn Localizer, v: &Volume3, truth_hint: Option<Point3>, cfg: &McConfig) -> Result<UncertaintySummary> {
    cfg.validate(McMode::Mcdo)?;
    aggregate(McMode::Mcdo, cfg.n_samples, cfg.keep_samples, |t| {
        Ok(Sample {
            heatmap: loc.predict(v, truth_hint, true, cfg.sample_seed(t))?,
            augmentation: None,
            clamped: 0,
        })
    })
}

/// One pass of the augmentation chain: `x0 = Ti^-1(Ts^-1(v))`,
/// `y = Ts(f(x0))`.
fn augmented_sample(
    loc: &dyn Localizer,
    v: &Volume3,
    truth_hint: Option<Point3>,
    cfg: &McConfig,
    n: usize,
    stochastic: bool,
) -> Result<Sample> {
    let s = cfg.sample_seed(n);
    let (tf, curve) = sample_transform(&cfg.priors, s, v.center())?;
    let inverse = tf.invert();
    let moved = inverse.apply(v, Interpolation::Trilinear);
    let (latent, clamped) = curve.apply_inverse_volume(&moved);
    let hint = truth_hint.map(|p| inverse.map_point(p));
    let pred = loc.predict(&latent, hint, stochastic, seed::mix(s))?;
    Ok(Sample {
        heatmap: tf.apply(&pred, Interpolation::Trilinear),
        augmentation: Some(AugmentationRecord::new(&tf, &curve)),
        clamped,
    })
}

/// `N` deterministic passes on randomly transformed inputs, mapped back.
pub fn run_tta(loc: &dyn Localizer, v: &Volume3, truth_hint: Option<Point3>, cfg: &McConfig) -> Result<UncertaintySummary> {
    cfg.validate(McMode::Tta)?;
    aggregate(McMode::Tta, cfg.n_samples, cfg.keep_samples, |n| {
        augmented_sample(loc, v, truth_hint, cfg, n, false)
    })
}

/// The augmentation chain with stochastic predictor passes.
pub fn run_hybrid(loc: &dyn Localizer, v: &Volume3, truth_hint: Option<Point3>, cfg: &McConfig) -> Result<UncertaintySummary> {
    cfg.validate(McMode::Hybrid)?;
    aggregate(McMode::Hybrid, cfg.n_samples, cfg.keep_samples, |n| {
        augmented_sample(loc, v, truth_hint, cfg, n, true)
    })
}

pub fn run_uncertainty(loc: &dyn Localizer, v: &Volume3, truth_hint: Option<Point3>, cfg: &McConfig) -> Result<UncertaintySummary> {
    match cfg.mode {
        McMode::Mcdo => run_mcdo(loc, v, truth_hint, cfg),
        McMode::Tta => run_tta(loc, v, truth_hint, cfg),
        McMode::Hybrid => run_hybrid(loc, v, truth_hint, cfg),
    }
}
