//! Geometric primitives shared by every other module.
//!
//! Points are row vectors and a similarity `g = (s, R, t)` acts as
//! `x ↦ s·x·R + t`. That convention is used everywhere in the crate, including
//! the latent-code action in [`crate::prior`].

mod marching_cubes;
mod mc_tables;
pub mod obj;
pub mod ply;
mod sampling;
mod spatial;
mod transform;

use rand::SeedableRng;
use thiserror::Error;

pub use marching_cubes::{marching_cubes, marching_cubes_batched, Aabb};
pub use sampling::{weighted_sample, SampleError};
pub use spatial::{nearest_neighbor, SpatialHash};
pub use transform::{
    random_rotation, rotation_angle_between, rotation_axis_angle, rotation_z, Sim3Record,
    Sim3Transform,
};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// The generator used for every stochastic operation: ChaCha with 8 rounds,
/// seeded from a `u64`. Portable and bit-reproducible across platforms.
pub type EfemRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> EfemRng {
    EfemRng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded by `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> EfemRng {
    let mut rng = EfemRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("positions ({positions}) and normals ({normals}) differ in length")]
    LengthMismatch { positions: usize, normals: usize },
    #[error("normal {index} is not unit length (norm {norm})")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("point {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("marching cubes resolution must be at least 2 per axis, got {0:?}")]
    Resolution([usize; 3]),
    #[error("scalar field is not finite at grid corner {0:?}")]
    NonFiniteField([usize; 3]),
}

/// `N ≥ 1` observed points with unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointCloud {
    positions: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl ScenePointCloud {
    pub fn new(positions: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self, GeometryError> {
        if positions.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if positions.len() != normals.len() {
            return Err(GeometryError::LengthMismatch {
                positions: positions.len(),
                normals: normals.len(),
            });
        }
        for (index, (p, n)) in positions.iter().zip(&normals).enumerate() {
            if !p.iter().chain(n.iter()).all(|v| v.is_finite()) {
                return Err(GeometryError::NonFinite { index });
            }
            let norm = n.norm();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(GeometryError::NonUnitNormal { index, norm });
            }
        }
        Ok(Self { positions, normals })
    }

    /// Like [`ScenePointCloud::new`] but renormalizes every nonzero normal first.
    pub fn with_normalized_normals(
        positions: Vec<Vec3>,
        mut normals: Vec<Vec3>,
    ) -> Result<Self, GeometryError> {
        for n in normals.iter_mut() {
            let norm = n.norm();
            if norm > 0.0 && norm.is_finite() {
                *n /= norm;
            }
        }
        Self::new(positions, normals)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn into_parts(self) -> (Vec<Vec3>, Vec<Vec3>) {
        (self.positions, self.normals)
    }

    /// Diagonal of the axis-aligned bounding box.
    pub fn diameter(&self) -> f64 {
        let bb = Aabb::from_points(&self.positions);
        (bb.max - bb.min).norm()
    }
}

/// Applies `g` to every point: positions `s·x·R + t`, normals `n·R`.
pub fn apply_sim3(g: &Sim3Transform, cloud: &ScenePointCloud) -> ScenePointCloud {
    ScenePointCloud {
        positions: cloud.positions.iter().map(|p| g.apply_point(p)).collect(),
        normals: cloud.normals.iter().map(|n| g.rotate(n)).collect(),
    }
}

/// Indexed triangle mesh. Triangles are counter-clockwise seen from outside.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub vertex_normals: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn bounding_box(&self) -> Option<Aabb> {
        if self.vertices.is_empty() {
            None
        } else {
            Some(Aabb::from_points(&self.vertices))
        }
    }

    /// Checks index bounds and degenerate triangles.
    pub fn validate(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.vertex_normals.len() == self.vertices.len()
            && self.triangles.iter().all(|t| {
                t.iter().all(|&i| i < n) && t[0] != t[1] && t[1] != t[2] && t[0] != t[2]
            })
    }
}
