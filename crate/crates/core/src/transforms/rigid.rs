use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Interpolation, Point3, Volume3};

type Mat3 = [[f64; 3]; 3];

/// Rotation by `angle_deg` about `axis` through `pivot`, followed by a
/// translation, all in voxel coordinates.
///
/// The point map is `p -> R(p - pivot) + pivot + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    axis: Point3,
    angle_deg: f64,
    translation: Point3,
    pivot: Point3,
    rot: Mat3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub axis: Point3,
    pub angle_deg: f64,
    pub translation: Point3,
}

fn norm(v: Point3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn rotation_matrix(axis: Point3, angle_deg: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

#[inline]
fn mat_vec(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
fn mat_t_vec(m: &Mat3, v: Point3) -> Point3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

impl RigidTransform {
    /// `axis` is normalized here; a zero axis is only accepted with a zero angle.
    pub fn new(axis: Point3, angle_deg: f64, translation: Point3, pivot: Point3) -> Result<Self> {
        let n = norm(axis);
        let finite = axis
            .iter()
            .chain(&translation)
            .chain(&pivot)
            .all(|x| x.is_finite())
            && angle_deg.is_finite();
        if !finite {
            return Err(Error::invalid_arg("rigid transform parameters must be finite"));
        }
        let axis = if n > 0.0 {
            [axis[0] / n, axis[1] / n, axis[2] / n]
        } else if angle_deg == 0.0 {
            [0.0, 0.0, 1.0]
        } else {
            return Err(Error::invalid_arg("rotation axis must be non-zero"));
        };
        Ok(Self {
            axis,
            angle_deg,
            translation,
            pivot,
            rot: rotation_matrix(axis, angle_deg),
        })
    }

    pub fn identity(pivot: Point3) -> Self {
        Self::new([0.0, 0.0, 1.0], 0.0, [0.0; 3], pivot).expect("identity is valid")
    }

    pub fn translation_only(translation: Point3, pivot: Point3) -> Self {
        Self::new([0.0, 0.0, 1.0], 0.0, translation, pivot).expect("finite translation")
    }

    pub fn from_params(p: &RigidParams, pivot: Point3) -> Result<Self> {
        Self::new(p.axis, p.angle_deg, p.translation, pivot)
    }

    pub fn params(&self) -> RigidParams {
        RigidParams {
            axis: self.axis,
            angle_deg: self.angle_deg,
            translation: self.translation,
        }
    }

    pub fn axis(&self) -> Point3 {
        self.axis
    }

    pub fn angle_deg(&self) -> f64 {
        self.angle_deg
    }

    pub fn translation(&self) -> Point3 {
        self.translation
    }

    pub fn pivot(&self) -> Point3 {
        self.pivot
    }

    pub fn with_pivot(&self, pivot: Point3) -> Self {
        Self {
            pivot,
            ..self.clone()
        }
    }

    #[inline]
    pub fn map_point(&self, p: Point3) -> Point3 {
        let r = mat_vec(&self.rot, [p[0] - self.pivot[0], p[1] - self.pivot[1], p[2] - self.pivot[2]]);
        [
            r[0] + self.pivot[0] + self.translation[0],
            r[1] + self.pivot[1] + self.translation[1],
            r[2] + self.pivot[2] + self.translation[2],
        ]
    }

    /// Inverse point map, `q -> R^T(q - pivot - translation) + pivot`.
    #[inline]
    pub fn unmap_point(&self, q: Point3) -> Point3 {
        let r = mat_t_vec(
            &self.rot,
            [
                q[0] - self.pivot[0] - self.translation[0],
                q[1] - self.pivot[1] - self.translation[1],
                q[2] - self.pivot[2] - self.translation[2],
            ],
        );
        [r[0] + self.pivot[0], r[1] + self.pivot[1], r[2] + self.pivot[2]]
    }

    /// Same axis and pivot, negated angle, translation `-R^T t`.
    pub fn invert(&self) -> Self {
        let t = mat_t_vec(&self.rot, self.translation);
        Self {
            axis: self.axis,
            angle_deg: -self.angle_deg,
            translation: [-t[0], -t[1], -t[2]],
            pivot: self.pivot,
            rot: transpose(&self.rot),
        }
    }

    /// Moves image content by this transform: output voxel `q` reads the
    /// input at `unmap_point(q)`. Dims and spacing are preserved.
    pub fn apply(&self, v: &Volume3, interp: Interpolation) -> Volume3 {
        Volume3::from_fn(v.dims(), v.spacing(), |i, j, k| {
            v.sample(self.unmap_point([i as f64, j as f64, k as f64]), interp)
        })
        .expect("same grid as a valid volume")
    }
}

fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}
