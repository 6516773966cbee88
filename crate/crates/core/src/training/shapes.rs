//! Procedural shape families with closed-form signed distance functions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Capsule,
    RoundedBox,
    PseudoMug,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Sphere, Self::Capsule, Self::RoundedBox, Self::PseudoMug];
}

/// A canonical shape centered near the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProceduralShape {
    Sphere { radius: f64 },
    /// Segment from `(−half_length, 0, 0)` to `(half_length, 0, 0)` swept by `radius`.
    Capsule { half_length: f64, radius: f64 },
    RoundedBox { half_extents: [f64; 3], rounding: f64 },
    /// Open-top cylindrical cup along `z` with a torus handle in the `xz` plane on the `+x` side.
    PseudoMug {
        radius: f64,
        half_height: f64,
        wall: f64,
        handle_major: f64,
        handle_minor: f64,
    },
}

fn capped_cylinder(x: &Vec3, r: f64, h: f64) -> f64 {
    let dx = x.xy().norm() - r;
    let dz = x.z.abs() - h;
    dx.max(dz).min(0.0) + (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt()
}

impl ProceduralShape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Self::Sphere { .. } => ShapeKind::Sphere,
            Self::Capsule { .. } => ShapeKind::Capsule,
            Self::RoundedBox { .. } => ShapeKind::RoundedBox,
            Self::PseudoMug { .. } => ShapeKind::PseudoMug,
        }
    }

    /// Exact SDF except for the mug, whose max/min composition is exact on the
    /// zero set and a bound elsewhere.
    pub fn sdf(&self, x: &Vec3) -> f64 {
        match *self {
            Self::Sphere { radius } => x.norm() - radius,
            Self::Capsule { half_length, radius } => {
                let t = x.x.clamp(-half_length, half_length);
                (x - Vec3::new(t, 0.0, 0.0)).norm() - radius
            }
            Self::RoundedBox { half_extents, rounding } => {
                let q = x.abs() - Vec3::from(half_extents) + Vec3::repeat(rounding);
                q.sup(&Vec3::zeros()).norm() + q.max().min(0.0) - rounding
            }
            Self::PseudoMug {
                radius,
                half_height,
                wall,
                handle_major,
                handle_minor,
            } => {
                let outer = capped_cylinder(x, radius, half_height);
                // Inner cavity reaches past the rim so the top is open.
                let inner = capped_cylinder(&(x - Vec3::new(0.0, 0.0, wall + 0.5 * half_height)), radius - wall, 1.5 * half_height);
                let shell = outer.max(-inner);
                let p = x - Vec3::new(radius, 0.0, 0.0);
                let torus = (Vec3::new(p.x, 0.0, p.z).norm() - handle_major).hypot(p.y) - handle_minor;
                shell.min(torus)
            }
        }
    }

    /// Central-difference gradient of [`Self::sdf`].
    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        let h = 1e-6;
        Vec3::from_fn(|i, _| {
            let mut e = Vec3::zeros();
            e[i] = h;
            (self.sdf(&(x + e)) - self.sdf(&(x - e))) / (2.0 * h)
        })
    }

    /// Radius of a ball around the origin containing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Self::Sphere { radius } => radius,
            Self::Capsule { half_length, radius } => half_length + radius,
            Self::RoundedBox { half_extents, .. } => Vec3::from(half_extents).norm(),
            Self::PseudoMug {
                radius,
                half_height,
                handle_major,
                handle_minor,
                ..
            } => (radius + handle_major + handle_minor).hypot(half_height),
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        match *self {
            Self::Sphere { radius } => Self::Sphere { radius: k * radius },
            Self::Capsule { half_length, radius } => Self::Capsule {
                half_length: k * half_length,
                radius: k * radius,
            },
            Self::RoundedBox { half_extents, rounding } => Self::RoundedBox {
                half_extents: half_extents.map(|h| k * h),
                rounding: k * rounding,
            },
            Self::PseudoMug {
                radius,
                half_height,
                wall,
                handle_major,
                handle_minor,
            } => Self::PseudoMug {
                radius: k * radius,
                half_height: k * half_height,
                wall: k * wall,
                handle_major: k * handle_major,
                handle_minor: k * handle_minor,
            },
        }
    }

    /// Shrinks the shape to fit the unit ball; shapes that already fit are unchanged.
    pub fn normalized(&self) -> Self {
        let r = self.bounding_radius();
        if r > 1.0 {
            self.scaled(1.0 / r)
        } else {
            self.clone()
        }
    }

    /// `n` points on the zero set: uniform candidates in a thin band around the
    /// surface, projected along the gradient until `|sdf| < 1e-9`.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec3>, TrainingError> {
        const MAX_TRIALS: usize = 100_000;
        let ext = 1.05 * self.bounding_radius();
        let band = 0.05 * ext;
        let mut out = Vec::with_capacity(n);
        let mut misses = 0usize;
        while out.len() < n {
            if misses >= MAX_TRIALS {
                return Err(TrainingError::Sampling(format!(
                    "no surface point found in {MAX_TRIALS} trials for {self:?}"
                )));
            }
            let mut x = Vec3::from_fn(|_, _| rng.random_range(-ext..ext));
            if self.sdf(&x).abs() > band {
                misses += 1;
                continue;
            }
            let mut ok = false;
            for _ in 0..20 {
                let f = self.sdf(&x);
                if f.abs() < 1e-9 {
                    ok = true;
                    break;
                }
                let g = self.gradient(&x);
                let gn = g.norm_squared();
                if gn < 1e-12 {
                    break;
                }
                x -= g * (f / gn);
            }
            if ok {
                out.push(x);
                misses = 0;
            } else {
                misses += 1;
            }
        }
        Ok(out)
    }
}

/// Inclusive parameter range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn check(&self, name: &str) -> Result<(), TrainingError> {
        if !(self.0 > 0.0 && self.0 <= self.1 && self.1.is_finite()) {
            return Err(TrainingError::Config(format!("range {name} = [{}, {}] must satisfy 0 < lo ≤ hi", self.0, self.1)));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            // Still consume one draw so sequences do not depend on range width.
            let _: f64 = rng.random();
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    /// Kinds drawn with equal probability.
    pub kinds: Vec<ShapeKind>,
    pub sphere_radius: Range,
    pub capsule_half_length: Range,
    pub capsule_radius: Range,
    pub box_half_extent: Range,
    pub box_rounding: Range,
    pub mug_radius: Range,
    pub mug_half_height: Range,
    pub mug_wall: Range,
    pub mug_handle_major: Range,
    pub mug_handle_minor: Range,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            kinds: vec![ShapeKind::Sphere, ShapeKind::Capsule],
            sphere_radius: Range(0.7, 1.0),
            capsule_half_length: Range(0.25, 0.5),
            capsule_radius: Range(0.3, 0.45),
            box_half_extent: Range(0.35, 0.6),
            box_rounding: Range(0.03, 0.1),
            mug_radius: Range(0.35, 0.45),
            mug_half_height: Range(0.4, 0.55),
            mug_wall: Range(0.05, 0.08),
            mug_handle_major: Range(0.15, 0.2),
            mug_handle_minor: Range(0.035, 0.05),
        }
    }
}

impl FamilyConfig {
    pub fn only(kinds: &[ShapeKind]) -> Self {
        Self {
            kinds: kinds.to_vec(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.kinds.is_empty() {
            return Err(TrainingError::Config("family has no shape kinds".into()));
        }
        for (name, r) in [
            ("sphere_radius", self.sphere_radius),
            ("capsule_half_length", self.capsule_half_length),
            ("capsule_radius", self.capsule_radius),
            ("box_half_extent", self.box_half_extent),
            ("box_rounding", self.box_rounding),
            ("mug_radius", self.mug_radius),
            ("mug_half_height", self.mug_half_height),
            ("mug_wall", self.mug_wall),
            ("mug_handle_major", self.mug_handle_major),
            ("mug_handle_minor", self.mug_handle_minor),
        ] {
            r.check(name)?;
        }
        if self.mug_wall.1 >= self.mug_radius.0 {
            return Err(TrainingError::Config("mug_wall must stay below mug_radius".into()));
        }
        Ok(())
    }
}

/// Draws a kind uniformly from the family, then its parameters uniformly
/// from their ranges, and normalizes into the unit ball.
pub fn sample_shape<R: Rng + ?Sized>(family: &FamilyConfig, rng: &mut R) -> Result<ProceduralShape, TrainingError> {
    family.validate()?;
    let kind = family.kinds[rng.random_range(0..family.kinds.len())];
    Ok(sample_kind(family, kind, rng).normalized())
}

pub(crate) fn sample_kind<R: Rng + ?Sized>(f: &FamilyConfig, kind: ShapeKind, rng: &mut R) -> ProceduralShape {
    match kind {
        ShapeKind::Sphere => ProceduralShape::Sphere {
            radius: f.sphere_radius.draw(rng),
        },
        ShapeKind::Capsule => ProceduralShape::Capsule {
            half_length: f.capsule_half_length.draw(rng),
            radius: f.capsule_radius.draw(rng),
        },
        ShapeKind::RoundedBox => {
            let half_extents = [f.box_half_extent.draw(rng), f.box_half_extent.draw(rng), f.box_half_extent.draw(rng)];
            let min_half = half_extents.iter().copied().fold(f64::INFINITY, f64::min);
            ProceduralShape::RoundedBox {
                half_extents,
                rounding: f.box_rounding.draw(rng).min(0.9 * min_half),
            }
        }
        ShapeKind::PseudoMug => ProceduralShape::PseudoMug {
            radius: f.mug_radius.draw(rng),
            half_height: f.mug_half_height.draw(rng),
            wall: f.mug_wall.draw(rng),
            handle_major: f.mug_handle_major.draw(rng),
            handle_minor: f.mug_handle_minor.draw(rng),
        },
    }
}
