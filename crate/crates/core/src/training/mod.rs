//! Prior training on procedural shapes.

mod shapes;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{rng_stream, Vec3};
use crate::prior::{CodeGrad, LatentCode, LatentLibrary, LearnedPrior, LibraryEntry, PriorError, PriorTopology};
use crate::vecnet::{adam_step, AdamConfig, AdamState};

pub use shapes::{sample_shape, FamilyConfig, ProceduralShape, Range, ShapeKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("surface sampling failed: {0}")]
    Sampling(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Prior(#[from] PriorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of a half-space crop.
    pub crop_prob: f64,
    /// Smallest fraction of points a crop keeps.
    pub crop_min_keep: f64,
    pub clutter_prob: f64,
    /// Largest fraction of points replaced by a neighboring shape.
    pub clutter_max_frac: f64,
    pub noise_std: f64,
    /// Fraction of queries drawn near the surface; the rest are uniform in the box.
    pub near_frac: f64,
    pub near_std: f64,
    /// Half-width of the uniform query box.
    pub uniform_extent: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_prob: 0.5,
            crop_min_keep: 0.4,
            clutter_prob: 0.3,
            clutter_max_frac: 0.2,
            noise_std: 0.005,
            near_frac: 0.7,
            near_std: 0.05,
            uniform_extent: 1.1,
        }
    }
}

impl AugmentConfig {
    /// Clean surface samples; the query mix is unchanged.
    pub fn disabled() -> Self {
        Self {
            crop_prob: 0.0,
            clutter_prob: 0.0,
            noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.crop_prob) && unit(self.clutter_prob) && unit(self.near_frac))
            || !(self.crop_min_keep > 0.0 && self.crop_min_keep <= 1.0)
            || !(0.0..1.0).contains(&self.clutter_max_frac)
            || !(self.noise_std >= 0.0 && self.near_std >= 0.0 && self.uniform_extent > 0.0)
        {
            return Err(TrainingError::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub surface_points: Vec<Vec3>,
    pub query_points: Vec<Vec3>,
    pub target_sdf: Vec<f64>,
}

/// Minimum number of queries per sample.
pub const MIN_QUERIES: usize = 256;

/// Surface points with crop, clutter and noise applied in that order, plus
/// SDF-labelled queries.
pub fn make_training_sample<R: Rng + ?Sized>(
    shape: &ProceduralShape,
    family: &FamilyConfig,
    aug: &AugmentConfig,
    n_points: usize,
    n_queries: usize,
    rng: &mut R,
) -> Result<TrainingSample, TrainingError> {
    aug.validate()?;
    if n_queries < MIN_QUERIES {
        return Err(TrainingError::Config(format!("need at least {MIN_QUERIES} queries, got {n_queries}")));
    }
    let clean = shape.sample_surface(n_points, rng)?;
    let mut pts = clean.clone();

    if rng.random::<f64>() < aug.crop_prob {
        let normal: Vec3 = Vec3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
        let keep = rng.random_range(aug.crop_min_keep..=1.0);
        let mut proj: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (p.dot(&normal), i)).collect();
        proj.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n_keep = ((keep * n_points as f64).ceil() as usize).clamp(1, n_points);
        let survivors: Vec<Vec3> = proj[..n_keep].iter().map(|&(_, i)| pts[i]).collect();
        pts = (0..n_points).map(|_| *survivors.choose(rng).expect("non-empty")).collect();
    }

    if rng.random::<f64>() < aug.clutter_prob && aug.clutter_max_frac > 0.0 {
        let frac = rng.random_range(0.0..=aug.clutter_max_frac);
        let n_replace = (frac * n_points as f64).floor() as usize;
        if n_replace > 0 {
            let other = sample_shape(family, rng)?;
            let dir = Vec3::from_fn(|_, _| StandardNormal.sample(rng)).normalize();
            let gap = rng.random_range(0.0..0.1);
            let offset = dir * (shape.bounding_radius() + other.bounding_radius() + gap);
            let mut near: Vec<Vec3> = other
                .sample_surface(4 * n_replace, rng)?
                .into_iter()
                .map(|p| p + offset)
                .collect();
            // The neighbor's points closest to this shape are the ones a crop would catch.
            near.sort_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()));
            for p in near.into_iter().take(n_replace) {
                let slot = rng.random_range(0..n_points);
                pts[slot] = p;
            }
        }
    }

    if aug.noise_std > 0.0 {
        let noise = Normal::new(0.0, aug.noise_std).expect("finite std");
        for p in pts.iter_mut() {
            *p += Vec3::from_fn(|_, _| noise.sample(rng));
        }
    }

    let n_near = (aug.near_frac * n_queries as f64).round() as usize;
    let offset = Normal::new(0.0, aug.near_std.max(0.0)).expect("finite std");
    let mut query_points = Vec::with_capacity(n_queries);
    for _ in 0..n_near {
        let base = clean[rng.random_range(0..clean.len())];
        query_points.push(base + Vec3::from_fn(|_, _| offset.sample(rng)));
    }
    let e = aug.uniform_extent;
    while query_points.len() < n_queries {
        query_points.push(Vec3::from_fn(|_, _| rng.random_range(-e..e)));
    }
    let target_sdf = query_points.iter().map(|q| shape.sdf(q)).collect();
    Ok(TrainingSample {
        surface_points: pts,
        query_points,
        target_sdf,
    })
}

/// `mean (pred − target)² + λ_c‖θ_c‖² + λ_s(θ_s − 1)²`.
pub fn loss(pred: &[f64], target: &[f64], code: &LatentCode, lambda_c: f64, lambda_s: f64) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len().max(1) as f64;
    mse + lambda_c * code.theta_c.norm_squared() + lambda_s * (code.theta_s - 1.0).powi(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub family: FamilyConfig,
    pub augment: AugmentConfig,
    pub topology: PriorTopology,
    pub steps: usize,
    pub batch_shapes: usize,
    pub queries_per_shape: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    /// Regularizers switch off after this fraction of the steps.
    pub anneal_frac: f64,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_final_frac: f64,
    pub library_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            augment: AugmentConfig::default(),
            topology: PriorTopology::default(),
            steps: 2000,
            batch_shapes: 16,
            queries_per_shape: 512,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lambda_c: 0.01,
            lambda_s: 0.01,
            anneal_frac: 0.5,
            lr_final_frac: 0.1,
            library_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.family.validate()?;
        self.augment.validate()?;
        if self.batch_shapes == 0 || self.queries_per_shape < MIN_QUERIES {
            return Err(TrainingError::Config(format!(
                "batch_shapes must be ≥ 1 and queries_per_shape ≥ {MIN_QUERIES}"
            )));
        }
        if !(self.lr > 0.0
            && self.lambda_c >= 0.0
            && self.lambda_s >= 0.0
            && (0.0..=1.0).contains(&self.anneal_frac)
            && (0.0..=1.0).contains(&self.lr_final_frac))
        {
            return Err(TrainingError::Config(
                "lr must be positive, λ non-negative, anneal_frac and lr_final_frac in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Regularizer weights in effect at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        let f = self.lr_final_frac;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    pub fn lambdas_at(&self, step: usize) -> (f64, f64) {
        if (step as f64) < self.anneal_frac * self.steps as f64 {
            (self.lambda_c, self.lambda_s)
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: LearnedPrior,
    pub library: LatentLibrary,
    pub log: Vec<StepLog>,
    /// Steps at which the 100-step smoothed loss exceeded its running minimum by more than 10%.
    pub divergence_steps: usize,
}

// RNG stream layout: 0 initializes the model, 1.. feed minibatches, the high
// range feeds the library and held-out evaluation.
const LIBRARY_STREAM: u64 = 1 << 48;
const HELDOUT_STREAM: u64 = 1 << 49;

fn batch_stream(step: usize, batch: usize, i: usize) -> u64 {
    1 + (step * batch + i) as u64
}

/// Runs Adam over minibatches, then encodes the library with the
/// `f32`-rounded weights that a saved checkpoint will hold.
pub fn train(cfg: &TrainConfig, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutput, TrainingError> {
    cfg.validate()?;
    let mut model = LearnedPrior::init(cfg.topology.clone(), &mut rng_stream(cfg.seed, 0))?;
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut state = AdamState::new(&model.param_shapes());
    let mut log = Vec::with_capacity(cfg.steps);
    let mut window = std::collections::VecDeque::with_capacity(100);
    let mut min_smoothed = f64::INFINITY;
    let mut divergence_steps = 0;

    for step in 0..cfg.steps {
        let (lc, ls) = cfg.lambdas_at(step);
        let b = cfg.batch_shapes as f64;
        let parts: Vec<Result<(f64, f64, crate::prior::PriorGrads), TrainingError>> = (0..cfg.batch_shapes)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_stream(cfg.seed, batch_stream(step, cfg.batch_shapes, i));
                let shape = sample_shape(&cfg.family, &mut rng)?;
                let sample = make_training_sample(
                    &shape,
                    &cfg.family,
                    &cfg.augment,
                    cfg.topology.n_points,
                    cfg.queries_per_shape,
                    &mut rng,
                )?;
                let mut grads = model.zero_grads();
                let (code, etape) = model.encode_with_tape(&sample.surface_points)?;
                let (pred, dtape) = model.decode_with_tape(&sample.query_points, &code)?;
                let m = pred.len() as f64;
                let mse = pred.iter().zip(&sample.target_sdf).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / m;
                let l = loss(&pred, &sample.target_sdf, &code, lc, ls);
                let d_pred: Vec<f64> = pred.iter().zip(&sample.target_sdf).map(|(p, t)| 2.0 * (p - t) / (m * b)).collect();
                let mut dcode = model.decoder_backward(dtape, &d_pred, &mut grads)?;
                let mut reg = CodeGrad::zeros(code.theta_r.len(), code.theta_inv.len());
                reg.theta_c = code.theta_c * (2.0 * lc / b);
                reg.theta_s = 2.0 * ls * (code.theta_s - 1.0) / b;
                dcode.add_assign(&reg);
                model.encoder_backward(etape, &dcode, &mut grads)?;
                Ok((l, mse, grads))
            })
            .collect();

        let mut total = 0.0;
        let mut total_mse = 0.0;
        let mut acc: Option<Vec<nalgebra::DMatrix<f64>>> = None;
        for p in parts {
            let (l, mse, g) = p?;
            total += l / b;
            total_mse += mse / b;
            let g = g.into_list();
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
            }
        }
        let grads = acc.expect("batch_shapes ≥ 1");
        if !total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainingError::NonFinite { step });
        }
        let adam = AdamConfig {
            lr: cfg.lr_at(step),
            ..adam
        };
        adam_step(&mut model.params_mut(), &grads, &mut state, &adam).map_err(PriorError::from)?;

        let entry = StepLog {
            step,
            loss: total,
            mse: total_mse,
            lambda: lc,
        };
        on_step(&entry);
        log.push(entry);

        if window.len() == 100 {
            window.pop_front();
        }
        window.push_back(total);
        if window.len() == 100 {
            let smoothed = window.iter().sum::<f64>() / 100.0;
            min_smoothed = min_smoothed.min(smoothed);
            if smoothed > 1.1 * min_smoothed {
                divergence_steps += 1;
                if divergence_steps == 1 {
                    log::warn!("smoothed loss {smoothed:.4e} exceeds its minimum {min_smoothed:.4e} by >10% at step {step}");
                }
            }
        }
    }

    model.quantize();
    let library = build_library(&model, cfg)?;
    Ok(TrainOutput {
        model,
        library,
        log,
        divergence_steps,
    })
}

/// Encodes `library_size` canonical shapes from clean surface samples.
pub fn build_library(model: &LearnedPrior, cfg: &TrainConfig) -> Result<LatentLibrary, TrainingError> {
    let entries: Vec<Result<LibraryEntry, TrainingError>> = (0..cfg.library_size)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_stream(cfg.seed, LIBRARY_STREAM + k as u64);
            let shape = sample_shape(&cfg.family, &mut rng)?;
            let pts = shape.sample_surface(cfg.topology.n_points, &mut rng)?;
            let code = model.encode(&pts)?;
            Ok(LibraryEntry {
                code,
                shape: serde_json::to_value(&shape).expect("shape serializes"),
            })
        })
        .collect();
    Ok(LatentLibrary {
        entries: entries.into_iter().collect::<Result<_, _>>()?,
    })
}

/// Mean `|pred − target|` over held-out shapes with clean inputs and the configured query mix.
pub fn heldout_sdf_error(model: &LearnedPrior, cfg: &TrainConfig, n_shapes: usize) -> Result<f64, TrainingError> {
    let aug = AugmentConfig {
        near_frac: cfg.augment.near_frac,
        near_std: cfg.augment.near_std,
        uniform_extent: cfg.augment.uniform_extent,
        ..AugmentConfig::disabled()
    };
    let errs: Vec<Result<(f64, usize), TrainingError>> = (0..n_shapes)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_stream(cfg.seed, HELDOUT_STREAM + k as u64);
            let shape = sample_shape(&cfg.family, &mut rng)?;
            let s = make_training_sample(&shape, &cfg.family, &aug, cfg.topology.n_points, cfg.queries_per_shape, &mut rng)?;
            let code = model.encode(&s.surface_points)?;
            let (pred, _) = model.decode_with_tape(&s.query_points, &code)?;
            Ok((pred.iter().zip(&s.target_sdf).map(|(p, t)| (p - t).abs()).sum(), pred.len()))
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0;
    for e in errs {
        let (s, k) = e?;
        sum += s;
        n += k;
    }
    Ok(sum / n.max(1) as f64)
}
