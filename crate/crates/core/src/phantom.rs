//! Synthetic head phantoms: smooth ellipsoidal thalami with known masks and
//! landmark targets, plus knobs (ventricle enlargement, noise, bias field)
//! that make cases harder.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{Side, TargetPoint};
use crate::pipeline::SideTargets;
use crate::seed;
use crate::volume::{Dims, Point3, Volume3};

/// Width (mm) of the tanh edge of each structure.
const EDGE_MM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// Center in mm.
    pub center: Point3,
    /// Semi-axes in mm.
    pub semi_axes: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    fn validate(&self, name: &str) -> Result<()> {
        if self.semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid_arg(format!("{name}: semi-axes must be positive and finite")));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::invalid_arg(format!("{name}: intensity must lie in [0,1]")));
        }
        Ok(())
    }

    /// Squared normalized radius; <= 1 inside.
    fn q(&self, p: Point3) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum()
    }

    fn contains(&self, p: Point3) -> bool {
        self.q(p) <= 1.0
    }

    /// Soft occupancy in [0,1], 0.5 on the surface.
    fn weight(&self, p: Point3) -> f64 {
        let mean_axis = (self.semi_axes[0] + self.semi_axes[1] + self.semi_axes[2]) / 3.0;
        let d = (self.q(p).sqrt() - 1.0) * mean_axis;
        if d < -4.0 * EDGE_MM {
            1.0
        } else if d > 4.0 * EDGE_MM {
            0.0
        } else {
            0.5 * (1.0 - (d / EDGE_MM).tanh())
        }
    }

    fn shifted_x(&self, dx: f64) -> Self {
        let mut e = *self;
        e.center[0] += dx;
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    pub brain: Ellipsoid,
    pub ventricle: Ellipsoid,
    pub left_thalamus: Ellipsoid,
    pub right_thalamus: Ellipsoid,
    /// Target position as a fraction of the semi-axes, measured medially,
    /// along +axis 1 and along +axis 2 from the thalamus center.
    pub target_offset: [f64; 3],
    /// Lateral displacement (mm) of each thalamus; the ventricle widens to match.
    pub ventricle_enlargement: f64,
    pub noise_std: f64,
    /// Peak relative deviation of the multiplicative bias field, in [0,1).
    pub bias_field_amplitude: f64,
    /// Each side's crop (voxels) must fit inside the volume around its target.
    pub crop_extent: Dims,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::default_for_dims([192, 192, 192], 1.0)
    }
}

impl PhantomSpec {
    /// Default anatomy laid out around the center of a `dims` grid.
    pub fn default_for_dims(dims: Dims, spacing: f64) -> Self {
        let c = dims.map(|n| (n as f64 - 1.0) * spacing / 2.0);
        let ext = dims.map(|n| n as f64 * spacing);
        Self {
            dims,
            spacing,
            brain: Ellipsoid {
                center: c,
                semi_axes: [0.4 * ext[0], 0.45 * ext[1], 0.4 * ext[2]],
                intensity: 0.55,
            },
            ventricle: Ellipsoid {
                center: [c[0], c[1], c[2] + 4.0],
                semi_axes: [4.0, 18.0, 12.0],
                intensity: 0.15,
            },
            left_thalamus: Ellipsoid {
                center: [c[0] - 14.0, c[1], c[2] + 4.0],
                semi_axes: [9.0, 15.0, 10.0],
                intensity: 0.8,
            },
            right_thalamus: Ellipsoid {
                center: [c[0] + 14.0, c[1], c[2] + 4.0],
                semi_axes: [9.0, 15.0, 10.0],
                intensity: 0.8,
            },
            target_offset: [0.35, 0.45, 0.35],
            ventricle_enlargement: 0.0,
            noise_std: 0.0,
            bias_field_amplitude: 0.0,
            crop_extent: [64, 64, 64],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::invalid_arg("phantom dims and spacing must be positive"));
        }
        self.brain.validate("brain")?;
        self.ventricle.validate("ventricle")?;
        self.left_thalamus.validate("left thalamus")?;
        self.right_thalamus.validate("right thalamus")?;
        if !(self.ventricle_enlargement >= 0.0 && self.ventricle_enlargement.is_finite()) {
            return Err(Error::invalid_arg("ventricle_enlargement must be >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid_arg("noise_std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.bias_field_amplitude) {
            return Err(Error::invalid_arg("bias_field_amplitude must lie in [0,1)"));
        }
        if self.target_offset.iter().map(|f| f * f).sum::<f64>() >= 1.0 {
            return Err(Error::invalid_arg("target_offset must lie inside the unit ball"));
        }
        if self.left_thalamus.center[0] >= self.right_thalamus.center[0] {
            return Err(Error::invalid_arg("left thalamus must have the smaller axis-0 center"));
        }
        Ok(())
    }

    /// Thalami and ventricle after the lateral displacement.
    fn displaced(&self) -> (Ellipsoid, Ellipsoid, Ellipsoid) {
        let e = self.ventricle_enlargement;
        let mut ventricle = self.ventricle;
        ventricle.semi_axes[0] += e;
        (self.left_thalamus.shifted_x(-e), self.right_thalamus.shifted_x(e), ventricle)
    }

    fn target_mm(th: &Ellipsoid, offset: [f64; 3], medial_sign: f64) -> Point3 {
        [
            th.center[0] + medial_sign * offset[0] * th.semi_axes[0],
            th.center[1] + offset[1] * th.semi_axes[1],
            th.center[2] + offset[2] * th.semi_axes[2],
        ]
    }

    /// Targets in voxel coordinates, left then right.
    pub fn targets(&self) -> [TargetPoint; 2] {
        let (l, r, _) = self.displaced();
        let s = self.spacing;
        let to_vox = |p: Point3| p.map(|x| x / s);
        [
            TargetPoint {
                position: to_vox(Self::target_mm(&l, self.target_offset, 1.0)),
                side: Side::Left,
            },
            TargetPoint {
                position: to_vox(Self::target_mm(&r, self.target_offset, -1.0)),
                side: Side::Right,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    pub image: Volume3,
    pub left_mask: Volume3,
    pub right_mask: Volume3,
    /// Left then right, voxel coordinates.
    pub targets: [TargetPoint; 2],
    pub spec: PhantomSpec,
}

impl PhantomCase {
    pub fn truth(&self) -> SideTargets {
        SideTargets {
            left: self.targets[0].position,
            right: self.targets[1].position,
        }
    }

    pub fn mask(&self, side: Side) -> &Volume3 {
        match side {
            Side::Left => &self.left_mask,
            Side::Right => &self.right_mask,
        }
    }
}

/// Smooth low-order polynomial in normalized coordinates, bounded by 1.
fn bias_poly(u: [f64; 3]) -> f64 {
    0.4 * u[0] + 0.3 * u[1] - 0.2 * u[2] + 0.1 * u[0] * u[1]
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let (left, right, ventricle) = spec.displaced();
    let s = spec.spacing;
    let sp = [s; 3];
    let pos = |i: usize, j: usize, k: usize| [i as f64 * s, j as f64 * s, k as f64 * s];

    let left_mask = Volume3::from_fn(spec.dims, sp, |i, j, k| left.contains(pos(i, j, k)) as u8 as f64)?;
    let right_mask = Volume3::from_fn(spec.dims, sp, |i, j, k| right.contains(pos(i, j, k)) as u8 as f64)?;
    if left_mask.count_nonzero() == 0 || right_mask.count_nonzero() == 0 {
        return Err(Error::SpecInfeasible("a thalamus mask is empty on this grid".into()));
    }
    if left_mask.data().iter().zip(right_mask.data()).any(|(&a, &b)| a > 0.0 && b > 0.0) {
        return Err(Error::SpecInfeasible("thalami overlap after displacement".into()));
    }

    let targets = spec.targets();
    for (t, mask) in targets.iter().zip([&left_mask, &right_mask]) {
        let r = t.rounded();
        if mask.get_checked(r) != Some(1.0) {
            return Err(Error::SpecInfeasible(format!("{} target {:?} outside its mask", t.side, t.position)));
        }
        for a in 0..3 {
            let half = (spec.crop_extent[a] / 2) as i64;
            if r[a] - half < 0 || r[a] - half + spec.crop_extent[a] as i64 > spec.dims[a] as i64 {
                return Err(Error::SpecInfeasible(format!(
                    "{} crop of extent {:?} does not fit in {:?}",
                    t.side, spec.crop_extent, spec.dims
                )));
            }
        }
    }

    let half_ext = spec.dims.map(|n| ((n as f64 - 1.0) * s / 2.0).max(s));
    let center = spec.dims.map(|n| (n as f64 - 1.0) * s / 2.0);
    let amp = spec.bias_field_amplitude;
    let layers = [spec.brain, ventricle, left, right];
    let clean = Volume3::from_fn(spec.dims, sp, |i, j, k| {
        let p = pos(i, j, k);
        let mut v = 0.0;
        for e in &layers {
            let w = e.weight(p);
            v = v * (1.0 - w) + e.intensity * w;
        }
        if amp > 0.0 {
            let u = [0, 1, 2].map(|a| (p[a] - center[a]) / half_ext[a]);
            v *= 1.0 + amp * bias_poly(u);
        }
        v
    })?;

    let image = if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid_arg(e.to_string()))?;
        let mut rng = seed::rng_for(spec.seed, 0x6e6f697365);
        let noisy: Vec<f64> = clean.data().iter().map(|&x| x + normal.sample(&mut rng)).collect();
        clean.with_data(noisy)?
    } else {
        clean
    };

    Ok(PhantomCase {
        image: image.rescale_intensity(),
        left_mask,
        right_mask,
        targets,
        spec: spec.clone(),
    })
}

/// How a cohort varies around its template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyMix {
    pub hard_count: usize,
    /// Uniform range of ventricle enlargement (mm) for clean cases.
    pub clean_enlargement: (f64, f64),
    pub clean_noise: f64,
    pub hard_enlargement: (f64, f64),
    pub hard_noise: f64,
    pub bias_field_amplitude: f64,
    /// Uniform jitter (mm, per axis) of both thalamus centers.
    pub position_jitter: f64,
}

impl Default for DifficultyMix {
    fn default() -> Self {
        Self {
            hard_count: 0,
            clean_enlargement: (0.0, 2.0),
            clean_noise: 0.02,
            hard_enlargement: (8.0, 12.0),
            hard_noise: 0.1,
            bias_field_amplitude: 0.1,
            position_jitter: 2.0,
        }
    }
}

impl DifficultyMix {
    pub fn with_hard(hard_count: usize) -> Self {
        Self {
            hard_count,
            ..Default::default()
        }
    }
}

/// Which of `n` cases are hard: a seeded choice of `hard_count` ids.
pub fn hard_case_ids(n: usize, hard_count: usize, cohort_seed: u64) -> Result<Vec<usize>> {
    if hard_count > n {
        return Err(Error::invalid_arg(format!("hard_count {hard_count} exceeds cohort size {n}")));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seed::rng_for(cohort_seed, 0x68617264));
    let mut hard = ids[..hard_count].to_vec();
    hard.sort_unstable();
    Ok(hard)
}

/// Spec of case `index`; depends only on the template, mix, seed, index and hardness.
pub fn case_spec(template: &PhantomSpec, mix: &DifficultyMix, cohort_seed: u64, index: usize, hard: bool) -> PhantomSpec {
    let case_seed = seed::derive(cohort_seed, index as u64);
    let mut rng = seed::rng(case_seed);
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    let j = mix.position_jitter;
    let shift: [f64; 3] = std::array::from_fn(|_| draw(&mut rng, (-j, j)));
    let mut spec = template.clone();
    for th in [&mut spec.left_thalamus, &mut spec.right_thalamus, &mut spec.ventricle] {
        for a in 0..3 {
            th.center[a] += shift[a];
        }
    }
    let (range, noise) = if hard {
        (mix.hard_enlargement, mix.hard_noise)
    } else {
        (mix.clean_enlargement, mix.clean_noise)
    };
    spec.ventricle_enlargement = draw(&mut rng, range);
    spec.noise_std = noise;
    spec.bias_field_amplitude = mix.bias_field_amplitude;
    spec.seed = case_seed;
    spec
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub index: usize,
    pub hard: bool,
    pub spec: PhantomSpec,
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// Specs for a whole cohort, without generating any volumes.
pub fn cohort_specs(n: usize, template: &PhantomSpec, mix: &DifficultyMix, cohort_seed: u64) -> Result<Vec<CohortEntry>> {
    if n == 0 {
        return Err(Error::invalid_arg("cohort size must be >= 1"));
    }
    let hard = hard_case_ids(n, mix.hard_count, cohort_seed)?;
    Ok((0..n)
        .map(|i| {
            let is_hard = hard.binary_search(&i).is_ok();
            CohortEntry {
                id: case_id(i),
                index: i,
                hard: is_hard,
                spec: case_spec(template, mix, cohort_seed, i, is_hard),
            }
        })
        .collect())
}

pub fn generate_cohort(n: usize, template: &PhantomSpec, mix: &DifficultyMix, cohort_seed: u64) -> Result<Vec<(CohortEntry, PhantomCase)>> {
    cohort_specs(n, template, mix, cohort_seed)?
        .into_par_iter()
        .map(|e| {
            let case = generate_phantom(&e.spec)?;
            Ok((e, case))
        })
        .collect()
}
