//! Synthetic tabletop scenes with ground-truth instance labels.
//!
//! Objects are procedural shapes placed on a square ground plane. Points that
//! fall inside another body are removed as a stand-in for occlusion.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::ply::{write_ply_file, PlyFormat};
use crate::geometry::{random_rotation, rng_from_seed, rotation_z, EfemRng, GeometryError, ScenePointCloud, Sim3Record, Sim3Transform, Vec3};
use crate::training::{sample_shape, FamilyConfig, ProceduralShape, Range, ShapeKind, TrainingError};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    Config(String),
    #[error("could not place {what} {index} after {attempts} attempts")]
    Placement { what: &'static str, index: usize, attempts: usize },
    #[error("every generated point was culled")]
    Empty,
    #[error(transparent)]
    Shape(#[from] TrainingError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    /// Upright objects with a random yaw, separated by the clearance.
    Z,
    /// Uniformly rotated objects, separated by the clearance.
    SO3,
    /// Rotated objects dropped onto each other in a small region.
    Pile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub setup: Setup,
    /// Inclusive range of object counts.
    pub n_objects: [usize; 2],
    /// Canonical shapes, at most unit bounding radius before scaling.
    pub family: FamilyConfig,
    pub scale: Range,
    pub background: bool,
    /// Plane covers `[-plane_half_extent, plane_half_extent]²` at `z = 0`.
    pub plane_half_extent: f64,
    /// Plane points per unit area.
    pub plane_density: f64,
    pub n_distractors: usize,
    pub distractor_family: FamilyConfig,
    pub points_per_object: usize,
    pub noise_sigma: f64,
    /// Minimum surface gap between bodies in Z and SO3.
    pub clearance: f64,
    /// Largest penetration depth in Pile, as a fraction of the smaller scale.
    pub pile_interpenetration: f64,
    /// Pile drop positions lie in `[-pile_half_extent, pile_half_extent]²`.
    pub pile_half_extent: f64,
    /// Keep only points whose normal faces the camera direction.
    pub single_view: bool,
    pub camera_direction: [f64; 3],
    pub max_placement_attempts: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            setup: Setup::Z,
            n_objects: [3, 8],
            family: FamilyConfig::only(&[ShapeKind::Sphere]),
            scale: Range(0.15, 0.25),
            background: true,
            plane_half_extent: 1.0,
            plane_density: 625.0,
            n_distractors: 0,
            distractor_family: FamilyConfig::only(&[ShapeKind::RoundedBox]),
            points_per_object: 1000,
            noise_sigma: 0.0,
            clearance: 0.02,
            pile_interpenetration: 0.1,
            pile_half_extent: 0.35,
            single_view: false,
            camera_direction: [1.0, -1.0, 1.5],
            max_placement_attempts: 2000,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        let [lo, hi] = self.n_objects;
        if lo == 0 || lo > hi {
            return bad(format!("n_objects {:?} must satisfy 1 ≤ lo ≤ hi", self.n_objects));
        }
        if !(self.scale.0 > 0.0 && self.scale.0 <= self.scale.1 && self.scale.1.is_finite()) {
            return bad(format!("scale range {:?} must satisfy 0 < lo ≤ hi", self.scale));
        }
        if self.points_per_object == 0 {
            return bad("points_per_object must be positive".into());
        }
        if !(self.plane_half_extent > 0.0 && self.plane_density > 0.0) {
            return bad("plane extent and density must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.clearance >= 0.0 && self.pile_interpenetration >= 0.0) {
            return bad("noise, clearance and interpenetration must be nonnegative".into());
        }
        if !(self.pile_half_extent > 0.0 && self.pile_half_extent <= self.plane_half_extent) {
            return bad("pile_half_extent must lie in (0, plane_half_extent]".into());
        }
        if Vec3::from(self.camera_direction).norm() < 1e-12 {
            return bad("camera_direction must be nonzero".into());
        }
        if self.max_placement_attempts == 0 {
            return bad("max_placement_attempts must be positive".into());
        }
        let shared: Vec<_> = self.family.kinds.iter().filter(|k| self.distractor_family.kinds.contains(k)).collect();
        if self.n_distractors > 0 && !shared.is_empty() {
            return bad(format!("distractor kinds {shared:?} overlap the object family"));
        }
        self.family.validate()?;
        if self.n_distractors > 0 {
            self.distractor_family.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub kind: ShapeKind,
    pub params: ProceduralShape,
    /// Canonical shape to scene.
    pub pose: Sim3Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Instance id per point; −1 for background and distractors.
    pub point_ids: Vec<i64>,
    pub instances: Vec<GtInstance>,
    #[serde(default)]
    pub distractors: Vec<GtInstance>,
}

/// One mask per instance id, in id order.
pub fn gt_masks(gt: &GroundTruth) -> Vec<Vec<bool>> {
    (0..gt.instances.len() as i64)
        .map(|k| gt.point_ids.iter().map(|&id| id == k).collect())
        .collect()
}

/// One sorted index list per instance id, in id order.
pub fn gt_index_sets(gt: &GroundTruth) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); gt.instances.len()];
    for (i, &id) in gt.point_ids.iter().enumerate() {
        if id >= 0 {
            sets[id as usize].push(i);
        }
    }
    sets
}

/// A placed shape. `check` holds dense scene-space surface samples used for
/// placement tests.
#[derive(Debug, Clone)]
struct Body {
    shape: ProceduralShape,
    pose: Sim3Transform,
    check: Vec<Vec3>,
}

impl Body {
    fn sdf(&self, x: &Vec3) -> f64 {
        let local = self.pose.inverse().apply_point(x);
        self.pose.scale * self.shape.sdf(&local)
    }

    fn bounding_radius(&self) -> f64 {
        self.pose.scale * self.shape.bounding_radius()
    }

    fn record(&self) -> GtInstance {
        GtInstance {
            kind: self.shape.kind(),
            params: self.shape.clone(),
            pose: self.pose.into(),
        }
    }
}

const CHECK_POINTS: usize = 1500;
/// Extra slack on clearance tests, covering gaps between check samples.
const CLEARANCE_SLACK: f64 = 0.002;
const DROP_STEP: f64 = 0.004;

/// Smallest signed distance from the samples of `a` to body `b`.
fn min_sdf_against(a: &[Vec3], b: &Body) -> f64 {
    a.iter().map(|p| b.sdf(p)).fold(f64::INFINITY, f64::min)
}

fn draw_rotation(setup: Setup, rng: &mut EfemRng) -> nalgebra::Matrix3<f64> {
    match setup {
        Setup::Z => rotation_z(rng.random_range(0.0..std::f64::consts::TAU)),
        Setup::SO3 | Setup::Pile => random_rotation(rng),
    }
}

fn transform(pose: &Sim3Transform, canon: &[Vec3]) -> Vec<Vec3> {
    canon.iter().map(|p| pose.apply_point(p)).collect()
}

struct Placer<'a> {
    spec: &'a SceneSpec,
    bodies: Vec<Body>,
}

impl Placer<'_> {
    fn place(&mut self, family: &FamilyConfig, what: &'static str, index: usize, rng: &mut EfemRng) -> Result<(), SceneError> {
        let spec = self.spec;
        let shape = sample_shape(family, rng)?;
        let scale = if spec.scale.0 == spec.scale.1 { spec.scale.0 } else { rng.random_range(spec.scale.0..=spec.scale.1) };
        let canon = shape.sample_surface(CHECK_POINTS, rng)?;
        for _ in 0..spec.max_placement_attempts {
            let rotation = draw_rotation(spec.setup, rng);
            let oriented = Sim3Transform::new(scale, rotation, Vec3::zeros())?;
            let local = transform(&oriented, &canon);
            let min_z = local.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
            let radius = scale * shape.bounding_radius();
            let placed = match spec.setup {
                Setup::Z | Setup::SO3 => {
                    let half = spec.plane_half_extent - radius;
                    if half <= 0.0 {
                        return Err(SceneError::Config(format!("{what} of radius {radius} does not fit on the plane")));
                    }
                    let xy = (rng.random_range(-half..=half), rng.random_range(-half..=half));
                    let pose = Sim3Transform {
                        translation: Vec3::new(xy.0, xy.1, -min_z),
                        ..oriented
                    };
                    let body = Body {
                        check: transform(&pose, &canon),
                        shape: shape.clone(),
                        pose,
                    };
                    self.clear_of_others(&body).then_some(body)
                }
                Setup::Pile => {
                    let half = spec.pile_half_extent.min(spec.plane_half_extent - radius).max(0.0);
                    let xy = (rng.random_range(-half..=half), rng.random_range(-half..=half));
                    self.drop(&shape, &oriented, &canon, xy, -min_z)
                }
            };
            if let Some(body) = placed {
                self.bodies.push(body);
                return Ok(());
            }
        }
        Err(SceneError::Placement {
            what,
            index,
            attempts: spec.max_placement_attempts,
        })
    }

    fn clear_of_others(&self, body: &Body) -> bool {
        let need = self.spec.clearance + CLEARANCE_SLACK;
        self.bodies.iter().all(|other| {
            let gap = (body.pose.translation - other.pose.translation).norm() - body.bounding_radius() - other.bounding_radius();
            gap >= need || (min_sdf_against(&body.check, other) >= need && min_sdf_against(&other.check, body) >= need)
        })
    }

    fn penetration_ok(&self, body: &Body) -> bool {
        self.bodies.iter().all(|other| {
            let gap = (body.pose.translation - other.pose.translation).norm() - body.bounding_radius() - other.bounding_radius();
            if gap > 0.0 {
                return true;
            }
            let budget = self.spec.pile_interpenetration * body.pose.scale.min(other.pose.scale);
            min_sdf_against(&body.check, other) >= -budget && min_sdf_against(&other.check, body) >= -budget
        })
    }

    /// Lowers the body from above the pile and returns the last height that
    /// stays within the interpenetration budget, or resting on the plane.
    fn drop(&self, shape: &ProceduralShape, oriented: &Sim3Transform, canon: &[Vec3], xy: (f64, f64), rest_z: f64) -> Option<Body> {
        let top = self.bodies.iter().map(|b| b.pose.translation.z + b.bounding_radius()).fold(0.0, f64::max);
        let make = |z: f64| {
            let pose = Sim3Transform {
                translation: Vec3::new(xy.0, xy.1, z),
                ..*oriented
            };
            Body {
                check: transform(&pose, canon),
                shape: shape.clone(),
                pose,
            }
        };
        let start = rest_z + top + DROP_STEP;
        let mut last = make(start);
        if !self.penetration_ok(&last) {
            return None;
        }
        let mut z = start;
        while z - DROP_STEP >= rest_z {
            z -= DROP_STEP;
            let next = make(z);
            if !self.penetration_ok(&next) {
                return Some(last);
            }
            last = next;
        }
        let floor = make(rest_z);
        Some(if self.penetration_ok(&floor) { floor } else { last })
    }
}

fn surface_points(body: &Body, n: usize, rng: &mut EfemRng) -> Result<Vec<(Vec3, Vec3)>, SceneError> {
    Ok(body
        .shape
        .sample_surface(n, rng)?
        .into_iter()
        .map(|p| {
            let normal = body.pose.rotate(&body.shape.gradient(&p).normalize());
            (body.pose.apply_point(&p), normal)
        })
        .collect())
}

/// Generates a scene and its labels. Identical specs give identical output.
pub fn generate(spec: &SceneSpec) -> Result<(ScenePointCloud, GroundTruth), SceneError> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let n = rng.random_range(spec.n_objects[0]..=spec.n_objects[1]);
    let mut placer = Placer { spec, bodies: Vec::new() };
    for k in 0..n {
        placer.place(&spec.family, "object", k, &mut rng)?;
    }
    for k in 0..spec.n_distractors {
        placer.place(&spec.distractor_family, "distractor", k, &mut rng)?;
    }
    let bodies = placer.bodies;

    // (position, normal, owning body or None for the plane)
    let mut raw: Vec<(Vec3, Vec3, Option<usize>)> = Vec::new();
    if spec.background {
        let e = spec.plane_half_extent;
        let count = (spec.plane_density * 4.0 * e * e).round() as usize;
        for _ in 0..count {
            raw.push((Vec3::new(rng.random_range(-e..e), rng.random_range(-e..e), 0.0), Vec3::z(), None));
        }
    }
    for (b, body) in bodies.iter().enumerate() {
        for (p, nrm) in surface_points(body, spec.points_per_object, &mut rng)? {
            raw.push((p, nrm, Some(b)));
        }
    }

    let camera = Vec3::from(spec.camera_direction).normalize();
    raw.retain(|(p, nrm, owner)| {
        let hidden = bodies.iter().enumerate().any(|(j, body)| Some(j) != *owner && body.sdf(p) < 0.0);
        !hidden && (!spec.single_view || nrm.dot(&camera) > 0.0)
    });

    // Instances that lost every point are dropped and ids stay dense.
    let mut counts = vec![0usize; n];
    for (_, _, owner) in &raw {
        if let Some(b) = owner.filter(|&b| b < n) {
            counts[b] += 1;
        }
    }
    let mut remap = vec![-1i64; n];
    let mut instances = Vec::new();
    for b in 0..n {
        if counts[b] > 0 {
            remap[b] = instances.len() as i64;
            instances.push(bodies[b].record());
        }
    }
    if raw.is_empty() {
        return Err(SceneError::Empty);
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| SceneError::Config(e.to_string()))?;
    let mut positions = Vec::with_capacity(raw.len());
    let mut normals = Vec::with_capacity(raw.len());
    let mut point_ids = Vec::with_capacity(raw.len());
    for (p, nrm, owner) in raw {
        let jitter = if spec.noise_sigma > 0.0 {
            Vec3::from_fn(|_, _| noise.sample(&mut rng))
        } else {
            Vec3::zeros()
        };
        positions.push(p + jitter);
        normals.push(nrm);
        point_ids.push(owner.map_or(-1, |b| if b < n { remap[b] } else { -1 }));
    }
    let gt = GroundTruth {
        point_ids,
        instances,
        distractors: bodies[n..].iter().map(Body::record).collect(),
    };
    Ok((ScenePointCloud::with_normalized_normals(positions, normals)?, gt))
}

/// Writes `<stem>.ply` and `<stem>.gt.json` into `dir`.
pub fn write_scene(dir: &Path, stem: &str, cloud: &ScenePointCloud, gt: &GroundTruth) -> Result<(), SceneError> {
    write_ply_file(cloud, PlyFormat::BinaryLittleEndian, &dir.join(format!("{stem}.ply")))?;
    std::fs::write(dir.join(format!("{stem}.gt.json")), serde_json::to_vec(gt)?)?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth, SceneError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
