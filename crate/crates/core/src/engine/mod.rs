//! Proposal-based EM segmentation.
//!
//! Each proposal owns a soft mask `W` over the scene. Phase 1 runs every
//! proposal independently (M-step, fitting error, E-step) with deduplication
//! after each sweep; phase 2 couples the survivors through a joint E-step
//! weighted by their fitting scores and drops contained proposals in its last
//! iterations. Proposal `k` draws from `rng_stream(seed, k)` only, so results
//! do not depend on the worker count.

mod select;
mod steps;

pub use select::{
    binarize, confidence, dedupe, estimate_pose, extract_proposal_mesh, filter_containment, inlier_fraction,
    mesh_support, score_proposal, Score,
};
pub use steps::{crop_weights, e_step, e_step_joint, fitting_error, init_proposal, m_step, normal_angle, PointError};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rng_stream, EfemRng, GeometryError, ScenePointCloud, Sim3Record, Sim3Transform, SpatialHash, TriangleMesh};
use crate::prior::{LatentCode, LatentLibrary, PriorError, PriorModel};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine config: {0}")]
    Config(String),
    #[error("no pose: {0}")]
    NoPose(&'static str),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropShape {
    Ball,
    /// Infinite along z.
    Cylinder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidencePenalty {
    /// `C = S1·min(1, S2/δ_C)`.
    Min,
    /// `C = S1·max(1, S2/δ_C)`; can exceed 1.
    AsPrinted,
}

/// Lengths are in scene units, angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub n_proposals: usize,
    pub crop_shape: CropShape,
    pub crop_radius: f64,
    /// Encoder input size; a learned prior's own size takes precedence.
    pub n_o: usize,
    /// Weight of `e_D`, per scene unit.
    pub alpha_d: f64,
    /// Weight of `e_N`, per radian.
    pub alpha_n: f64,
    /// Background constant `Ω`.
    pub omega: f64,
    pub delta_d: f64,
    pub delta_n: f64,
    pub delta_c: f64,
    pub phase1_steps: usize,
    pub phase2_steps: usize,
    pub min_survivor_points: usize,
    /// Phase-1 iterations before survivor-count termination applies.
    pub termination_grace: usize,
    pub dedupe_iou: f64,
    pub containment_frac: f64,
    /// Phase-2 iterations, counted from the end, that apply containment filtering.
    pub containment_iters: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub output_delta_d: f64,
    pub output_delta_n: f64,
    pub use_normals: bool,
    pub use_phase2: bool,
    pub mesh_resolution: usize,
    pub confidence_penalty: ConfidencePenalty,
    /// Compare normals against the signed gradient only.
    pub strict_normal_sign: bool,
    /// Assign points claimed by several instances to the one with the highest `W`.
    pub disjoint_masks: bool,
    /// `e_D = theta_s·|Ψ|`; when false, the canonical `|Ψ|`.
    pub metric_distance: bool,
    /// Canonical radius beyond which learned priors are not evaluated.
    pub far_field_radius: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_proposals: 60,
            crop_shape: CropShape::Ball,
            crop_radius: 0.3,
            n_o: 1024,
            alpha_d: 40.0,
            alpha_n: 1.0 / std::f64::consts::PI,
            omega: 0.1,
            delta_d: 0.03,
            delta_n: 30f64.to_radians(),
            delta_c: 0.5,
            phase1_steps: 15,
            phase2_steps: 10,
            min_survivor_points: 64,
            termination_grace: 3,
            dedupe_iou: 0.3,
            containment_frac: 0.8,
            containment_iters: 3,
            scale_min: 0.05,
            scale_max: 0.5,
            output_delta_d: 0.05,
            output_delta_n: 45f64.to_radians(),
            use_normals: true,
            use_phase2: true,
            mesh_resolution: 48,
            confidence_penalty: ConfidencePenalty::Min,
            strict_normal_sign: false,
            disjoint_masks: false,
            metric_distance: true,
            far_field_radius: 2.0,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let positive = [
            ("crop_radius", self.crop_radius),
            ("alpha_d", self.alpha_d),
            ("omega", self.omega),
            ("delta_d", self.delta_d),
            ("delta_n", self.delta_n),
            ("delta_c", self.delta_c),
            ("dedupe_iou", self.dedupe_iou),
            ("containment_frac", self.containment_frac),
            ("scale_min", self.scale_min),
            ("output_delta_d", self.output_delta_d),
            ("output_delta_n", self.output_delta_n),
            ("far_field_radius", self.far_field_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(EngineError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha_n >= 0.0 && self.alpha_n.is_finite()) {
            return Err(EngineError::Config(format!("alpha_n must be non-negative, got {}", self.alpha_n)));
        }
        if self.n_proposals == 0 || self.n_o == 0 {
            return Err(EngineError::Config("n_proposals and n_o must be at least 1".into()));
        }
        if self.phase1_steps == 0 || self.phase2_steps == 0 {
            return Err(EngineError::Config("phase step counts must be at least 1".into()));
        }
        if self.output_delta_d < self.delta_d || self.output_delta_n < self.delta_n {
            return Err(EngineError::Config("output thresholds must not be below scoring thresholds".into()));
        }
        if !(self.scale_max > self.scale_min) {
            return Err(EngineError::Config(format!("empty scale range [{}, {}]", self.scale_min, self.scale_max)));
        }
        if self.mesh_resolution < 2 {
            return Err(EngineError::Config("mesh_resolution must be at least 2".into()));
        }
        Ok(())
    }

    /// The same config for a scene scaled by `s`: lengths scale by `s` and
    /// `alpha_d` (per scene unit) by `1/s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            crop_radius: self.crop_radius * s,
            delta_d: self.delta_d * s,
            output_delta_d: self.output_delta_d * s,
            scale_min: self.scale_min * s,
            scale_max: self.scale_max * s,
            alpha_d: if self.metric_distance { self.alpha_d / s } else { self.alpha_d },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Active,
    Terminated,
    Merged,
    Filtered,
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub weights: Vec<f64>,
    pub code: Option<LatentCode>,
    pub status: ProposalStatus,
    pub s1: f64,
    /// Encoder inputs of the latest M-step.
    inputs: Vec<usize>,
    errors: Vec<PointError>,
    rng: EfemRng,
}

impl Proposal {
    fn is_active(&self) -> bool {
        self.status == ProposalStatus::Active
    }

    /// M-step and fitting error; terminates on an empty foreground.
    fn refit(&mut self, scene: &ScenePointCloud, prior: &PriorModel, n_o: usize, cfg: &EngineConfig) -> Result<(), EngineError> {
        match m_step(scene, &self.weights, prior, n_o, &mut self.rng)? {
            None => {
                self.status = ProposalStatus::Terminated;
                Ok(())
            }
            Some((code, inputs)) => {
                self.errors = fitting_error(scene, &code, prior, cfg)?;
                self.s1 = inlier_fraction(&self.errors, &inputs, cfg);
                self.inputs = inputs;
                self.code = Some(code);
                Ok(())
            }
        }
    }

    fn output_mask(&self, cfg: &EngineConfig) -> Vec<usize> {
        self.errors
            .iter()
            .enumerate()
            .filter(|(_, e)| e.e_d < cfg.output_delta_d && e.e_n < cfg.output_delta_n)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub points: usize,
    pub proposals_spawned: usize,
    pub phase1_iterations: usize,
    pub phase2_iterations: usize,
    pub terminated: usize,
    pub merged: usize,
    pub filtered_scale: usize,
    pub filtered_containment: usize,
    pub survivors: usize,
}

#[derive(Debug, Clone)]
pub struct Instance {
    /// Ascending scene point indices.
    pub point_indices: Vec<usize>,
    pub confidence: f64,
    pub s1: f64,
    pub s2: f64,
    pub mesh: TriangleMesh,
    pub pose: Option<Sim3Transform>,
    pub code: LatentCode,
    /// Index of the originating proposal.
    pub proposal: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Segmentation {
    pub instances: Vec<Instance>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub point_indices: Vec<usize>,
    pub confidence: f64,
    pub s1: f64,
    pub s2: f64,
    pub pose: Option<Sim3Record>,
    pub mesh_file: Option<String>,
}

/// Wire form of a [`Segmentation`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub instances: Vec<InstanceRecord>,
    pub diagnostics: Diagnostics,
}

impl Segmentation {
    /// `mesh_files[i]` names the mesh written for instance `i`.
    pub fn to_report(&self, mesh_files: &[Option<String>]) -> Report {
        Report {
            instances: self
                .instances
                .iter()
                .enumerate()
                .map(|(i, inst)| InstanceRecord {
                    point_indices: inst.point_indices.clone(),
                    confidence: inst.confidence,
                    s1: inst.s1,
                    s2: inst.s2,
                    pose: inst.pose.map(Sim3Record::from),
                    mesh_file: mesh_files.get(i).cloned().flatten(),
                })
                .collect(),
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Scale range check used at the start of phase 2 and on the final survivors.
pub fn scale_in_range(code: Option<&LatentCode>, cfg: &EngineConfig) -> bool {
    code.is_some_and(|c| c.theta_s >= cfg.scale_min && c.theta_s <= cfg.scale_max)
}

fn active_indices(props: &[Proposal]) -> Vec<usize> {
    (0..props.len()).filter(|&k| props[k].is_active()).collect()
}

fn mark(props: &mut [Proposal], alive: &[usize], kept: &[usize], status: ProposalStatus) -> usize {
    let mut n = 0;
    for (pos, &k) in alive.iter().enumerate() {
        if kept.binary_search(&pos).is_err() {
            props[k].status = status;
            n += 1;
        }
    }
    n
}

fn dedupe_active(props: &mut [Proposal], cfg: &EngineConfig) -> usize {
    let alive = active_indices(props);
    let masks: Vec<Vec<bool>> = alive.iter().map(|&k| binarize(&props[k].weights)).collect();
    let s1: Vec<f64> = alive.iter().map(|&k| props[k].s1).collect();
    let kept = dedupe(&masks, &s1, cfg.dedupe_iou);
    mark(props, &alive, &kept, ProposalStatus::Merged)
}

fn first_error(results: Vec<Result<(), EngineError>>) -> Result<(), EngineError> {
    results.into_iter().collect()
}

/// Runs the full pipeline. Parallel sections use the current rayon pool.
pub fn run(
    scene: &ScenePointCloud,
    prior: &PriorModel,
    library: Option<&LatentLibrary>,
    cfg: &EngineConfig,
) -> Result<Segmentation, EngineError> {
    cfg.validate()?;
    let n_o = prior.input_size().unwrap_or(cfg.n_o);
    if n_o != cfg.n_o {
        log::info!("using the prior's encoder size {n_o} instead of n_o = {}", cfg.n_o);
    }
    let n = scene.len();
    let mut diag = Diagnostics {
        points: n,
        proposals_spawned: cfg.n_proposals,
        ..Diagnostics::default()
    };

    let mut props: Vec<Proposal> = (0..cfg.n_proposals)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_stream(cfg.seed, k as u64);
            let weights = init_proposal(scene, cfg, &mut rng);
            Proposal {
                weights,
                code: None,
                status: ProposalStatus::Active,
                s1: 0.0,
                inputs: Vec::new(),
                errors: Vec::new(),
                rng,
            }
        })
        .collect();

    let phase1 = cfg.phase1_steps + if cfg.use_phase2 { 0 } else { cfg.phase2_steps };
    for it in 0..phase1 {
        let results: Vec<Result<(), EngineError>> = props
            .par_iter_mut()
            .filter(|p| p.is_active())
            .map(|p| {
                p.refit(scene, prior, n_o, cfg)?;
                if !p.is_active() {
                    return Ok(());
                }
                let e: Vec<f64> = p.errors.iter().map(|e| e.e).collect();
                p.weights = e_step(&e, cfg.omega);
                if it >= cfg.termination_grace && p.output_mask(cfg).len() < cfg.min_survivor_points {
                    p.status = ProposalStatus::Terminated;
                }
                Ok(())
            })
            .collect();
        first_error(results)?;
        diag.merged += dedupe_active(&mut props, cfg);
        diag.phase1_iterations = it + 1;
        log::debug!("phase 1 iteration {it}: {} active", active_indices(&props).len());
    }

    if cfg.use_phase2 {
        for p in props.iter_mut().filter(|p| p.is_active()) {
            if !scale_in_range(p.code.as_ref(), cfg) {
                p.status = ProposalStatus::Filtered;
                diag.filtered_scale += 1;
            }
        }
        for it in 0..cfg.phase2_steps {
            let results: Vec<Result<(), EngineError>> = props
                .par_iter_mut()
                .filter(|p| p.is_active())
                .map(|p| p.refit(scene, prior, n_o, cfg))
                .collect();
            first_error(results)?;
            let alive = active_indices(&props);
            let e: Vec<Vec<f64>> = alive.iter().map(|&k| props[k].errors.iter().map(|e| e.e).collect()).collect();
            let s1: Vec<f64> = alive.iter().map(|&k| props[k].s1).collect();
            for (w, &k) in e_step_joint(&e, &s1, cfg.omega).into_iter().zip(&alive) {
                props[k].weights = w;
            }
            if it + cfg.containment_iters >= cfg.phase2_steps {
                let masks: Vec<Vec<bool>> = alive.iter().map(|&k| binarize(&props[k].weights)).collect();
                let kept = filter_containment(&masks, &s1, cfg.containment_frac);
                diag.filtered_containment += mark(&mut props, &alive, &kept, ProposalStatus::Filtered);
            }
            diag.phase2_iterations = it + 1;
            log::debug!("phase 2 iteration {it}: {} active", active_indices(&props).len());
        }
    }

    // Final validity: scale range and a minimum number of small-error points.
    for p in props.iter_mut().filter(|p| p.is_active()) {
        if !scale_in_range(p.code.as_ref(), cfg) {
            p.status = ProposalStatus::Filtered;
            diag.filtered_scale += 1;
        } else if p.output_mask(cfg).len() < cfg.min_survivor_points {
            p.status = ProposalStatus::Terminated;
        }
    }
    diag.terminated = props.iter().filter(|p| p.status == ProposalStatus::Terminated).count();

    let index = SpatialHash::build(scene.positions())?;
    let alive = active_indices(&props);
    let built: Vec<Result<Instance, EngineError>> = alive
        .par_iter()
        .map(|&k| {
            let p = &props[k];
            let code = p.code.clone().expect("active proposals have a code");
            let mesh = extract_proposal_mesh(prior, &code, cfg.mesh_resolution)?;
            let s2 = mesh_support(&mesh, scene, &index, cfg);
            let pose = match library {
                Some(lib) if !prior.is_analytic() => match estimate_pose(&code, lib) {
                    Ok(g) => Some(g),
                    Err(EngineError::NoPose(why)) => {
                        log::debug!("proposal {k}: no pose ({why})");
                        None
                    }
                    Err(e) => return Err(e),
                },
                _ => None,
            };
            Ok(Instance {
                point_indices: p.output_mask(cfg),
                confidence: confidence(p.s1, s2, cfg),
                s1: p.s1,
                s2,
                mesh,
                pose,
                code,
                proposal: k,
            })
        })
        .collect();
    let mut instances = built.into_iter().collect::<Result<Vec<_>, _>>()?;
    if cfg.disjoint_masks {
        make_disjoint(&mut instances, &props);
    }
    instances.retain(|inst| !inst.point_indices.is_empty());
    diag.survivors = instances.len();
    Ok(Segmentation {
        instances,
        diagnostics: diag,
    })
}

/// Each point claimed by several instances stays with the highest `W`; ties go to the lower proposal.
fn make_disjoint(instances: &mut [Instance], props: &[Proposal]) {
    let n = props.first().map_or(0, |p| p.weights.len());
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (a, inst) in instances.iter().enumerate() {
        for &i in &inst.point_indices {
            let w = props[inst.proposal].weights[i];
            match owner[i] {
                Some(b) if props[instances[b].proposal].weights[i] >= w => {}
                _ => owner[i] = Some(a),
            }
        }
    }
    for (a, inst) in instances.iter_mut().enumerate() {
        inst.point_indices.retain(|&i| owner[i] == Some(a));
    }
}
