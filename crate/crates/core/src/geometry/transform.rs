use nalgebra::{UnitQuaternion, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Mat3, Vec3};

/// Rotation by `angle` radians about the z axis, in row-vector form.
///
/// Row vectors are rotated counter-clockwise: `(1,0,0)·R = (cos, sin, 0)`.
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Row-vector rotation about a unit axis.
pub fn rotation_axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let axis = nalgebra::Unit::new_normalize(*axis);
    let q = UnitQuaternion::from_axis_angle(&axis, angle);
    q.to_rotation_matrix().into_inner().transpose()
}

/// Draws a rotation uniformly from SO(3) via a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    loop {
        let q = Vector4::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = q.norm();
        if n > 1e-9 {
            let q = nalgebra::Quaternion::new(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
            let uq = UnitQuaternion::new_unchecked(q);
            return uq.to_rotation_matrix().into_inner().transpose();
        }
    }
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// A similarity transform `g = (s, R, t)` acting on row vectors as `x ↦ s·x·R + t`.
///
/// Normals transform by `n ↦ n·R`; scale never touches them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "Sim3Record", try_from = "Sim3Record")]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, checking `s > 0` and `R ∈ SO(3)` to 1e-6.
    pub fn new(scale: f64, rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(GeometryError::InvalidTransform(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let orth = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        let det = rotation.determinant();
        if orth > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::InvalidTransform(format!(
                "rotation is not in SO(3) (orthogonality residual {orth:.3e}, det {det:.6})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn from_scale(scale: f64) -> Self {
        Self {
            scale,
            ..Self::identity()
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale_range: (f64, f64), translation_extent: f64) -> Self {
        let scale = if scale_range.0 < scale_range.1 {
            (rng.random_range(scale_range.0.ln()..scale_range.1.ln())).exp()
        } else {
            scale_range.0
        };
        let translation = Vec3::new(
            rng.random_range(-translation_extent..=translation_extent),
            rng.random_range(-translation_extent..=translation_extent),
            rng.random_range(-translation_extent..=translation_extent),
        );
        Self {
            scale,
            rotation: random_rotation(rng),
            translation,
        }
    }

    /// `s·x·R + t`.
    #[inline]
    pub fn apply_point(&self, x: &Vec3) -> Vec3 {
        self.scale * self.rotate(x) + self.translation
    }

    /// `x·R`, the rotation part only.
    #[inline]
    pub fn rotate(&self, x: &Vec3) -> Vec3 {
        self.rotation.tr_mul(x)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: other.rotation * self.rotation,
            translation: self.scale * self.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Sim3Transform {
            scale: inv_s,
            rotation: rt,
            translation: -inv_s * rt.tr_mul(&self.translation),
        }
    }

    /// Rotation as nine row-major floats.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }
}

/// Wire form of a transform: `{s, R (row-major 9 floats), t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sim3Record {
    pub s: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<Sim3Transform> for Sim3Record {
    fn from(g: Sim3Transform) -> Self {
        Sim3Record {
            s: g.scale,
            r: g.rotation_row_major(),
            t: [g.translation.x, g.translation.y, g.translation.z],
        }
    }
}

impl TryFrom<Sim3Record> for Sim3Transform {
    type Error = GeometryError;

    fn try_from(rec: Sim3Record) -> Result<Self, Self::Error> {
        Sim3Transform::new(
            rec.s,
            Mat3::from_row_slice(&rec.r),
            Vec3::new(rec.t[0], rec.t[1], rec.t[2]),
        )
    }
}
