use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Segmenter;
use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{Interpolation, Volume3};

const P_HIT: f64 = 0.9;
const P_MISS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryNoise {
    /// Probability of flipping the label of a voxel on a mask boundary.
    pub flip_prob: f64,
    pub seed: u64,
}

/// Stage-one stand-in that reads known thalamus masks. Masks are resampled
/// (nearest) onto the input grid, assuming the input covers the same
/// physical extent.
#[derive(Debug, Clone)]
pub struct TruthSegmenter {
    left: Volume3,
    right: Volume3,
    noise: Option<BoundaryNoise>,
    swap_labels: bool,
}

impl TruthSegmenter {
    pub fn new(left: Volume3, right: Volume3) -> Result<Self> {
        if !left.same_grid(&right) {
            return Err(Error::invalid_arg("left and right masks must share a grid"));
        }
        Ok(Self {
            left,
            right,
            noise: None,
            swap_labels: false,
        })
    }

    pub fn with_boundary_noise(mut self, noise: BoundaryNoise) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise.flip_prob) {
            return Err(Error::invalid_arg("flip_prob must lie in [0,1]"));
        }
        self.noise = Some(noise);
        Ok(self)
    }

    /// Emits the left mask in the right channel and vice versa.
    pub fn with_swapped_labels(mut self, swap: bool) -> Self {
        self.swap_labels = swap;
        self
    }

    fn labels_on(&self, input: &Volume3) -> Result<Vec<u8>> {
        let grid = |m: &Volume3| -> Result<Volume3> {
            if m.dims() == input.dims() {
                Ok(m.clone())
            } else {
                m.resample_to(input.dims(), Interpolation::Nearest)
            }
        };
        let (l, r) = (grid(&self.left)?, grid(&self.right)?);
        let (l, r) = if self.swap_labels { (r, l) } else { (l, r) };
        let mut labels: Vec<u8> = l
            .data()
            .iter()
            .zip(r.data())
            .map(|(&a, &b)| {
                if a > 0.5 {
                    1
                } else if b > 0.5 {
                    2
                } else {
                    0
                }
            })
            .collect();
        if let Some(noise) = self.noise {
            perturb_boundary(&mut labels, input.dims(), noise);
        }
        Ok(labels)
    }
}

fn perturb_boundary(labels: &mut [u8], dims: [usize; 3], noise: BoundaryNoise) {
    let [nx, ny, nz] = dims;
    let original = labels.to_vec();
    let mut rng = seed::rng(noise.seed);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = i + nx * (j + ny * k);
                let here = original[idx];
                let mut other = None;
                let mut visit = |ii: usize, jj: usize, kk: usize| {
                    let l = original[ii + nx * (jj + ny * kk)];
                    if l != here && other.is_none() {
                        other = Some(l);
                    }
                };
                if i > 0 { visit(i - 1, j, k) }
                if i + 1 < nx { visit(i + 1, j, k) }
                if j > 0 { visit(i, j - 1, k) }
                if j + 1 < ny { visit(i, j + 1, k) }
                if k > 0 { visit(i, j, k - 1) }
                if k + 1 < nz { visit(i, j, k + 1) }
                if let Some(l) = other {
                    if rng.random::<f64>() < noise.flip_prob {
                        labels[idx] = l;
                    }
                }
            }
        }
    }
}

fn probabilities(input: &Volume3, labels: &[u8]) -> Result<[Volume3; 3]> {
    let channel = |c: u8| -> Result<Volume3> {
        input.with_data(
            labels
                .iter()
                .map(|&l| if l == c { P_HIT } else { P_MISS })
                .collect(),
        )
    };
    Ok([channel(0)?, channel(1)?, channel(2)?])
}

impl Segmenter for TruthSegmenter {
    fn predict(&self, input: &Volume3) -> Result<[Volume3; 3]> {
        let labels = self.labels_on(input)?;
        probabilities(input, &labels)
    }
}

/// Fallback segmenter: voxels with intensity in `[lo, hi]` are foreground,
/// split into left/right at the axis-0 midline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSegmenter {
    pub lo: f64,
    pub hi: f64,
}

impl Segmenter for ThresholdSegmenter {
    fn predict(&self, input: &Volume3) -> Result<[Volume3; 3]> {
        let nx = input.dims()[0];
        let labels: Vec<u8> = input
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                if x < self.lo || x > self.hi {
                    0
                } else if (idx % nx) * 2 < nx {
                    1
                } else {
                    2
                }
            })
            .collect();
        probabilities(input, &labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::dice_score;

    fn ball(dims: [usize; 3], c: [f64; 3], r: f64) -> Volume3 {
        Volume3::from_fn(dims, [1.0; 3], |i, j, k| {
            let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
            if d2 <= r * r { 1.0 } else { 0.0 }
        })
        .unwrap()
    }

    fn argmax_labels(p: &[Volume3; 3]) -> Vec<u8> {
        (0..p[0].len())
            .map(|i| {
                let v = [p[0].data()[i], p[1].data()[i], p[2].data()[i]];
                (0..3).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap() as u8
            })
            .collect()
    }

    fn masks() -> (Volume3, Volume3) {
        (ball([40, 30, 30], [12.0, 15.0, 15.0], 6.0), ball([40, 30, 30], [28.0, 15.0, 15.0], 6.0))
    }

    fn binary(labels: &[u8], c: u8, like: &Volume3) -> Volume3 {
        like.with_data(labels.iter().map(|&l| (l == c) as u8 as f64).collect()).unwrap()
    }

    #[test]
    fn clean_masks_are_reproduced() {
        let (l, r) = masks();
        let seg = TruthSegmenter::new(l.clone(), r.clone()).unwrap();
        let p = seg.predict(&l).unwrap();
        let labels = argmax_labels(&p);
        assert_eq!(binary(&labels, 1, &l), l);
        assert_eq!(binary(&labels, 2, &l), r);
        for i in 0..l.len() {
            let s = p[0].data()[i] + p[1].data()[i] + p[2].data()[i];
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(p[1].data().iter().zip(l.data()).all(|(&p, &m)| m == 0.0 || p >= 0.5));
    }

    #[test]
    fn boundary_noise_keeps_dice_high() {
        let (l, r) = masks();
        let seg = TruthSegmenter::new(l.clone(), r.clone())
            .unwrap()
            .with_boundary_noise(BoundaryNoise { flip_prob: 0.3, seed: 4 })
            .unwrap();
        let labels = argmax_labels(&seg.predict(&l).unwrap());
        let dl = dice_score(&binary(&labels, 1, &l), &l).unwrap();
        let dr = dice_score(&binary(&labels, 2, &l), &r).unwrap();
        assert!(dl >= 0.8 && dr >= 0.8, "{dl} {dr}");
        assert!(dl < 1.0);
    }

    #[test]
    fn swapped_labels_swap_channels() {
        let (l, r) = masks();
        let seg = TruthSegmenter::new(l.clone(), r.clone()).unwrap().with_swapped_labels(true);
        let labels = argmax_labels(&seg.predict(&l).unwrap());
        assert_eq!(binary(&labels, 1, &l), r);
    }

    #[test]
    fn resamples_masks_to_coarse_grid() {
        let (l, r) = masks();
        let seg = TruthSegmenter::new(l.clone(), r).unwrap();
        let coarse = l.downsample_to([20, 15, 15]).unwrap();
        let p = seg.predict(&coarse).unwrap();
        assert_eq!(p[1].dims(), [20, 15, 15]);
        assert!(p[1].data().iter().any(|&x| x >= 0.5));
    }

    #[test]
    fn threshold_fallback_splits_sides() {
        let (l, r) = masks();
        let img = l.with_data(l.data().iter().zip(r.data()).map(|(a, b)| 0.2 + 0.6 * (a + b)).collect()).unwrap();
        let seg = ThresholdSegmenter { lo: 0.5, hi: 1.0 };
        let labels = argmax_labels(&seg.predict(&img).unwrap());
        assert_eq!(binary(&labels, 1, &l), l);
        assert_eq!(binary(&labels, 2, &l), r);
    }
}
