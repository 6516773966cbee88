//! SIM(3)-equivariant shape priors.
//!
//! A [`LatentCode`] splits a shape into a rotation-equivariant part `theta_r`,
//! an invariant part `theta_inv`, a center `theta_c` and a scale `theta_s`.
//! Decoders see a query only through its canonical coordinate
//! `x̃ = (x − theta_c)/theta_s`, so transforming query and code together
//! leaves the canonical SDF unchanged.

mod learned;
mod library;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::geometry::{Sim3Transform, Vec3};
use crate::vecnet::VecNetError;

pub use learned::{CodeGrad, DecoderTape, EncoderTape, LearnedPrior, PriorGrads, PriorTopology};
pub use library::{LatentLibrary, LibraryEntry, LIBRARY_TAG};
pub use oracle::SphereOracle;

/// Config string selecting the analytic sphere backend.
pub const SPHERE_ORACLE: &str = "oracle:sphere";
/// `theta_s` at or below this cannot canonicalize a query.
pub const MIN_SCALE: f64 = 1e-9;
/// Gradients shorter than this carry no usable direction.
pub const MIN_GRADIENT_NORM: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("degenerate input: {0}")]
    DegenerateFeature(&'static str),
    #[error("latent scale {0} is not positive")]
    DegenerateScale(f64),
    #[error("decoder gradient vanishes")]
    ZeroGradient,
    #[error("latent dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("encoder expects {expected} points, got {got}")]
    InputSize { expected: usize, got: usize },
    #[error(transparent)]
    VecNet(#[from] VecNetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    /// `K` vector channels, each transforming as a row vector `v ↦ v·R`.
    pub theta_r: Vec<Vec3>,
    pub theta_inv: Vec<f64>,
    pub theta_c: Vec3,
    pub theta_s: f64,
}

impl LatentCode {
    /// `g∘Θ = (Θ_R·R, Θ_inv, s·Θ_c·R + t, s·Θ_s)`.
    pub fn act(&self, g: &Sim3Transform) -> LatentCode {
        LatentCode {
            theta_r: self.theta_r.iter().map(|v| g.rotate(v)).collect(),
            theta_inv: self.theta_inv.clone(),
            theta_c: g.apply_point(&self.theta_c),
            theta_s: g.scale * self.theta_s,
        }
    }

    #[inline]
    pub fn canonicalize(&self, x: &Vec3) -> Vec3 {
        (x - self.theta_c) / self.theta_s
    }

    pub fn is_finite(&self) -> bool {
        self.theta_r.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.theta_inv.iter().all(|v| v.is_finite())
            && self.theta_c.iter().all(|c| c.is_finite())
            && self.theta_s.is_finite()
    }

    fn check_scale(&self) -> Result<(), PriorError> {
        if self.theta_s > MIN_SCALE {
            Ok(())
        } else {
            Err(PriorError::DegenerateScale(self.theta_s))
        }
    }

    /// Number of scalars in the flat layout `[theta_r, theta_inv, theta_c, theta_s]`.
    pub fn flat_len(&self) -> usize {
        3 * self.theta_r.len() + self.theta_inv.len() + 4
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for v in &self.theta_r {
            out.extend(v.iter());
        }
        out.extend(&self.theta_inv);
        out.extend(self.theta_c.iter());
        out.push(self.theta_s);
        out
    }

    pub fn from_flat(k: usize, n_inv: usize, flat: &[f64]) -> Result<Self, PriorError> {
        if flat.len() != 3 * k + n_inv + 4 {
            return Err(PriorError::DimensionMismatch(format!(
                "flat code of length {} for K={k}, inv={n_inv}",
                flat.len()
            )));
        }
        let theta_r = (0..k).map(|i| Vec3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2])).collect();
        let o = 3 * k;
        Ok(Self {
            theta_r,
            theta_inv: flat[o..o + n_inv].to_vec(),
            theta_c: Vec3::new(flat[o + n_inv], flat[o + n_inv + 1], flat[o + n_inv + 2]),
            theta_s: flat[o + n_inv + 3],
        })
    }
}

/// Euclidean distance between the invariant parts; zero when both are empty.
pub fn latent_distance(a: &LatentCode, b: &LatentCode) -> Result<f64, PriorError> {
    if a.theta_inv.len() != b.theta_inv.len() {
        return Err(PriorError::DimensionMismatch(format!(
            "{} vs {} invariant entries",
            a.theta_inv.len(),
            b.theta_inv.len()
        )));
    }
    Ok(a.theta_inv
        .iter()
        .zip(&b.theta_inv)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt())
}

/// Decoder value and gradient at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    /// Canonical-frame SDF `Ψ(x̃)`.
    pub psi: f64,
    /// `∇_x (theta_s·Ψ) = ∇_x̃ Ψ`.
    pub grad: Vec3,
}

/// A trained network or the analytic sphere.
#[derive(Debug, Clone)]
pub enum PriorModel {
    Sphere(SphereOracle),
    Learned(Box<LearnedPrior>),
}

impl PriorModel {
    /// `"oracle:sphere"` or a checkpoint path.
    pub fn load(source: &str) -> Result<Self, PriorError> {
        if source == SPHERE_ORACLE {
            return Ok(Self::Sphere(SphereOracle));
        }
        if let Some(rest) = source.strip_prefix("oracle:") {
            return Err(PriorError::Format(format!("unknown oracle {rest:?}")));
        }
        Ok(Self::Learned(Box::new(LearnedPrior::load_file(std::path::Path::new(source))?)))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere(_) => SPHERE_ORACLE,
            Self::Learned(_) => "learned",
        }
    }

    /// Closed-form backends are exact everywhere; networks are only trusted near the shape.
    pub fn is_analytic(&self) -> bool {
        matches!(self, Self::Sphere(_))
    }

    /// Encoder input size; `None` when any size is accepted.
    pub fn input_size(&self) -> Option<usize> {
        match self {
            Self::Sphere(_) => None,
            Self::Learned(p) => Some(p.topology.n_points),
        }
    }

    pub fn encode(&self, points: &[Vec3]) -> Result<LatentCode, PriorError> {
        match self {
            Self::Sphere(o) => o.encode(points),
            Self::Learned(p) => p.encode(points),
        }
    }

    /// Canonical SDF `Ψ(Θ_inv, ⟨Θ_R, x̃⟩)`.
    pub fn decode(&self, x: &Vec3, code: &LatentCode) -> Result<f64, PriorError> {
        Ok(self.evaluate(std::slice::from_ref(x), code, false)?[0].psi)
    }

    /// Distance in the units of `x`: `theta_s·Ψ`.
    pub fn decode_metric(&self, x: &Vec3, code: &LatentCode) -> Result<f64, PriorError> {
        Ok(code.theta_s * self.decode(x, code)?)
    }

    /// Gradient of [`Self::decode_metric`] with respect to `x`.
    pub fn decode_gradient(&self, x: &Vec3, code: &LatentCode) -> Result<Vec3, PriorError> {
        let g = self.evaluate(std::slice::from_ref(x), code, true)?[0].grad;
        if g.norm() < MIN_GRADIENT_NORM {
            return Err(PriorError::ZeroGradient);
        }
        Ok(g)
    }

    /// Batched decode; gradients are zero unless `with_grad`.
    pub fn evaluate(&self, xs: &[Vec3], code: &LatentCode, with_grad: bool) -> Result<Vec<FieldSample>, PriorError> {
        code.check_scale()?;
        match self {
            Self::Sphere(o) => Ok(o.evaluate(xs, code)),
            Self::Learned(p) => p.evaluate(xs, code, with_grad),
        }
    }
}
