use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Localizer;
use crate::error::{Error, Result};
use crate::heatmap::{gaussian_heatmap, HeatmapSpec};
use crate::seed;
use crate::volume::{Point3, Volume3};

/// Controlled test double for uncertainty experiments: emits a Gaussian
/// heatmap at the known truth position, perturbed on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleLocalizerConfig {
    /// Std of the Gaussian position noise (voxels), stochastic passes only.
    pub jitter_std: f64,
    /// Systematic offset added to the truth (voxels).
    pub bias: Point3,
    /// Probability of emitting a spurious peak far from the truth.
    pub failure_rate: f64,
    /// Minimum distance (voxels) between a spurious peak and the truth.
    pub failure_min_distance: f64,
    pub heatmap: HeatmapSpec,
    /// Seeds the failure draw of deterministic passes.
    pub seed: u64,
}

impl Default for OracleLocalizerConfig {
    fn default() -> Self {
        Self {
            jitter_std: 0.0,
            bias: [0.0; 3],
            failure_rate: 0.0,
            failure_min_distance: 12.0,
            heatmap: HeatmapSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleLocalizer {
    cfg: OracleLocalizerConfig,
}

impl OracleLocalizer {
    pub fn new(cfg: OracleLocalizerConfig) -> Result<Self> {
        if !(cfg.jitter_std >= 0.0) || !cfg.jitter_std.is_finite() {
            return Err(Error::invalid_arg(format!("jitter_std must be >= 0, got {}", cfg.jitter_std)));
        }
        if !(0.0..=1.0).contains(&cfg.failure_rate) {
            return Err(Error::invalid_arg(format!(
                "failure_rate must lie in [0,1], got {}",
                cfg.failure_rate
            )));
        }
        if cfg.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid_arg("bias must be finite"));
        }
        cfg.heatmap.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleLocalizerConfig {
        &self.cfg
    }

    /// Heatmap center for one pass; exposed for tests and diagnostics.
    pub fn peak_center(&self, dims: [usize; 3], truth: Point3, stochastic: bool, seed: u64) -> Point3 {
        let mut rng = if stochastic {
            seed::rng(seed)
        } else {
            let key = truth
                .iter()
                .fold(dims[0] as u64 ^ ((dims[1] as u64) << 20) ^ ((dims[2] as u64) << 40), |h, x| {
                    seed::mix(h ^ x.to_bits())
                });
            seed::rng_for(self.cfg.seed, key)
        };
        let fail = self.cfg.failure_rate > 0.0 && rng.random::<f64>() < self.cfg.failure_rate;
        if fail {
            return far_point(&mut rng, dims, truth, self.cfg.failure_min_distance);
        }
        let mut c = [
            truth[0] + self.cfg.bias[0],
            truth[1] + self.cfg.bias[1],
            truth[2] + self.cfg.bias[2],
        ];
        if stochastic && self.cfg.jitter_std > 0.0 {
            let normal = Normal::new(0.0, self.cfg.jitter_std).expect("validated std");
            for x in &mut c {
                *x += normal.sample(&mut rng);
            }
        }
        c
    }
}

/// Uniform grid point at least `min_dist` from `truth`; falls back to the
/// farthest corner after a bounded number of rejections.
fn far_point<R: Rng>(rng: &mut R, dims: [usize; 3], truth: Point3, min_dist: f64) -> Point3 {
    let dist = |p: Point3| ((p[0] - truth[0]).powi(2) + (p[1] - truth[1]).powi(2) + (p[2] - truth[2]).powi(2)).sqrt();
    for _ in 0..64 {
        let p = [
            rng.random_range(0..dims[0]) as f64,
            rng.random_range(0..dims[1]) as f64,
            rng.random_range(0..dims[2]) as f64,
        ];
        if dist(p) >= min_dist {
            return p;
        }
    }
    let mut best = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        best[a] = if (truth[a] - 0.0).abs() > (hi - truth[a]).abs() { 0.0 } else { hi };
    }
    best
}

impl Localizer for OracleLocalizer {
    fn predict(&self, input: &Volume3, truth_hint: Option<Point3>, stochastic: bool, seed: u64) -> Result<Volume3> {
        let truth = truth_hint
            .ok_or_else(|| Error::invalid_arg("oracle localizer requires a truth position"))?;
        let center = self.peak_center(input.dims(), truth, stochastic, seed);
        gaussian_heatmap(&self.cfg.heatmap, center, input.dims(), input.spacing())
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// `f(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoLocalizer;

impl Localizer for EchoLocalizer {
    fn predict(&self, input: &Volume3, _truth_hint: Option<Point3>, _stochastic: bool, _seed: u64) -> Result<Volume3> {
        Ok(input.clone())
    }

    fn name(&self) -> &'static str {
        "echo"
    }
}
