//! Single-proposal EM pieces: initialization, M-step, fitting error, E-steps.

use rand::Rng;

use super::{CropShape, EngineConfig, EngineError};
use crate::geometry::{weighted_sample, SampleError, ScenePointCloud, Vec3};
use crate::prior::{LatentCode, PriorModel};

/// Per-point fitting error against one code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointError {
    /// Distance to the zero level set.
    pub e_d: f64,
    /// Angle between the observed normal and the field gradient, in `[0, π]`.
    pub e_n: f64,
    /// `α_D·e_D + α_N·e_N`.
    pub e: f64,
}

/// Crop indicator around `center`: 1 inside the ball (or infinite z-cylinder), else 0.
pub fn crop_weights(scene: &ScenePointCloud, center: &Vec3, cfg: &EngineConfig) -> Vec<f64> {
    let r2 = cfg.crop_radius * cfg.crop_radius;
    scene
        .positions()
        .iter()
        .map(|p| {
            let d = p - center;
            let d2 = match cfg.crop_shape {
                CropShape::Ball => d.norm_squared(),
                CropShape::Cylinder => d.x * d.x + d.y * d.y,
            };
            if d2 <= r2 { 1.0 } else { 0.0 }
        })
        .collect()
}

/// Initial weights of one proposal: a crop around a uniformly chosen scene point.
pub fn init_proposal<R: Rng + ?Sized>(scene: &ScenePointCloud, cfg: &EngineConfig, rng: &mut R) -> Vec<f64> {
    let center = scene.positions()[rng.random_range(0..scene.len())];
    crop_weights(scene, &center, cfg)
}

/// Samples `n_o` encoder inputs from `w` and encodes them.
///
/// Returns the code and the sampled indices; an empty foreground is reported as
/// `Ok(None)`.
pub fn m_step<R: Rng + ?Sized>(
    scene: &ScenePointCloud,
    w: &[f64],
    prior: &PriorModel,
    n_o: usize,
    rng: &mut R,
) -> Result<Option<(LatentCode, Vec<usize>)>, EngineError> {
    let idx = match weighted_sample(w, n_o, rng) {
        Ok(idx) => idx,
        Err(SampleError::ForegroundEmpty) => return Ok(None),
        Err(e) => return Err(EngineError::Config(e.to_string())),
    };
    let pts: Vec<Vec3> = idx.iter().map(|&i| scene.positions()[i]).collect();
    match prior.encode(&pts) {
        Ok(code) if code.is_finite() && code.theta_s > crate::prior::MIN_SCALE => Ok(Some((code, idx))),
        // A degenerate sample set (e.g. one repeated point) cannot support a shape.
        Ok(_) | Err(crate::prior::PriorError::DegenerateFeature(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Angle between a unit normal and a gradient direction; `π` when the gradient vanishes.
pub fn normal_angle(n: &Vec3, grad: &Vec3, strict_sign: bool) -> f64 {
    let g = grad.norm();
    if !(g >= crate::prior::MIN_GRADIENT_NORM) {
        return std::f64::consts::PI;
    }
    let a = (n.dot(grad) / g).clamp(-1.0, 1.0).acos();
    if strict_sign {
        a
    } else {
        a.min(std::f64::consts::PI - a)
    }
}

/// Fitting error of every scene point against `code`.
///
/// For learned priors, points farther than `far_field_radius` canonical units
/// from `theta_c` skip the network: `e_D` is the distance to the unit canonical
/// ball and `e_N = π`.
pub fn fitting_error(
    scene: &ScenePointCloud,
    code: &LatentCode,
    prior: &PriorModel,
    cfg: &EngineConfig,
) -> Result<Vec<PointError>, EngineError> {
    let pos = scene.positions();
    let nrm = scene.normals();
    let metric = if cfg.metric_distance { code.theta_s } else { 1.0 };
    let mut out = vec![
        PointError {
            e_d: 0.0,
            e_n: 0.0,
            e: 0.0
        };
        pos.len()
    ];
    let mut near_idx = Vec::with_capacity(pos.len());
    let far = cfg.far_field_radius * code.theta_s;
    for (i, p) in pos.iter().enumerate() {
        let d = (p - code.theta_c).norm();
        if !prior.is_analytic() && d > far {
            out[i].e_d = metric * (d / code.theta_s - 1.0);
            out[i].e_n = std::f64::consts::PI;
        } else {
            near_idx.push(i);
        }
    }
    let near_pts: Vec<Vec3> = near_idx.iter().map(|&i| pos[i]).collect();
    let samples = prior.evaluate(&near_pts, code, cfg.use_normals)?;
    for (&i, s) in near_idx.iter().zip(&samples) {
        out[i].e_d = metric * s.psi.abs();
        out[i].e_n = normal_angle(&nrm[i], &s.grad, cfg.strict_normal_sign);
    }
    for pe in out.iter_mut() {
        if cfg.use_normals {
            pe.e = cfg.alpha_d * pe.e_d + cfg.alpha_n * pe.e_n;
        } else {
            pe.e_n = 0.0;
            pe.e = cfg.alpha_d * pe.e_d;
        }
    }
    Ok(out)
}

/// `W_i = e^{−E_i} / (e^{−E_i} + Ω)` with `E` clamped at zero.
pub fn e_step(e: &[f64], omega: f64) -> Vec<f64> {
    e.iter()
        .map(|&v| {
            let f = (-v.max(0.0)).exp();
            f / (f + omega)
        })
        .collect()
}

/// `W_k[i] = s1_k·e^{−E_k,i} / (Σ_j s1_j·e^{−E_j,i} + Ω)`.
pub fn e_step_joint(e: &[Vec<f64>], s1: &[f64], omega: f64) -> Vec<Vec<f64>> {
    let k = e.len();
    let n = e.first().map_or(0, |r| r.len());
    let mut out = vec![vec![0.0; n]; k];
    let mut num = vec![0.0; k];
    for i in 0..n {
        let mut total = omega;
        for j in 0..k {
            num[j] = s1[j] * (-e[j][i].max(0.0)).exp();
            total += num[j];
        }
        for j in 0..k {
            out[j][i] = num[j] / total;
        }
    }
    out
}
