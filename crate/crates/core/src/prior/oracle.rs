use super::{FieldSample, LatentCode, PriorError};
use crate::geometry::Vec3;

/// Closed-form sphere prior: `Ψ(x̃) = ‖x̃‖ − 1`.
///
/// Encoding takes the centroid as center and the mean distance to it as
/// radius; `theta_r` is the identity frame and `theta_inv` is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SphereOracle;

impl SphereOracle {
    pub fn encode(&self, points: &[Vec3]) -> Result<LatentCode, PriorError> {
        if points.is_empty() {
            return Err(PriorError::DegenerateFeature("empty point set"));
        }
        let n = points.len() as f64;
        let c = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
        let r = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
        if !(r > 1e-12) {
            return Err(PriorError::DegenerateFeature("all points coincide"));
        }
        Ok(LatentCode {
            theta_r: vec![Vec3::x(), Vec3::y(), Vec3::z()],
            theta_inv: Vec::new(),
            theta_c: c,
            theta_s: r,
        })
    }

    pub fn evaluate(&self, xs: &[Vec3], code: &LatentCode) -> Vec<FieldSample> {
        xs.iter()
            .map(|x| {
                let q = code.canonicalize(x);
                let n = q.norm();
                FieldSample {
                    psi: n - 1.0,
                    grad: if n > 0.0 { q / n } else { Vec3::zeros() },
                }
            })
            .collect()
    }
}
