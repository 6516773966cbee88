//! Vector-neuron encoder and softplus decoder.
//!
//! Encoder: centered points → per-point lift (3 channels) → per-point VN
//! blocks → mean pool → global VN blocks → `F`. Then
//! `F̂ = F/σ` with `σ` the RMS radius of the centered inputs, `Θ_R = W_R·F̂`,
//! `Θ_inv = ⟨W_I·F̂, Θ_R⟩`, `Θ_c = W_C·F + P̄`, `Θ_s = e^γ·σ`.
//! `F` vanishes on rotationally symmetric inputs, so it cannot carry the scale.
//!
//! Decoder input per query: `[Θ_inv, Θ_R·x̃, ‖x̃‖²]`. With `radial_base` the
//! MLP output is a residual on the unit sphere: `Ψ = MLP + ‖x̃‖ − 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FieldSample, LatentCode, PriorError};
use crate::geometry::Vec3;
use crate::vecnet::{
    invariant_head, invariant_head_backward, kaiming, mean_pool,
    mean_pool_backward, round_to_f32, Checkpoint, MlpGrads, MlpTape, MlpTopology, ScalarMlp, VecFeature, VnBlock,
    VnBlockGrads, VnStack, VnTape,
};

const CHECKPOINT_KIND: &str = "efem-prior";
/// Queries per decoder batch; bounds peak memory.
const DECODE_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTopology {
    /// Encoder input size `N_O`.
    pub n_points: usize,
    /// Per-point vector widths after the 3-channel lift.
    pub point_widths: Vec<usize>,
    /// Global vector widths after pooling.
    pub global_widths: Vec<usize>,
    /// Channels `K` of `Θ_R`.
    pub k_rot: usize,
    /// Channels paired with `Θ_R` to form `Θ_inv` (`k_inv_dirs·K` scalars).
    pub k_inv_dirs: usize,
    pub mlp_hidden: usize,
    pub mlp_depth: usize,
    pub softplus_beta: f64,
    /// Adds `‖x̃‖ − 1` to the MLP output.
    #[serde(default = "enabled")]
    pub radial_base: bool,
}

fn enabled() -> bool {
    true
}

impl Default for PriorTopology {
    fn default() -> Self {
        Self {
            n_points: 1024,
            point_widths: vec![32, 32],
            global_widths: vec![64, 64],
            k_rot: 16,
            k_inv_dirs: 4,
            mlp_hidden: 64,
            mlp_depth: 3,
            softplus_beta: 10.0,
            radial_base: true,
        }
    }
}

impl PriorTopology {
    pub fn n_inv(&self) -> usize {
        self.k_inv_dirs * self.k_rot
    }

    pub fn decoder_input(&self) -> usize {
        self.n_inv() + self.k_rot + 1
    }

    fn feature_width(&self) -> usize {
        *self.global_widths.last().or(self.point_widths.last()).unwrap_or(&LIFT_CHANNELS)
    }

    fn validate(&self) -> Result<(), PriorError> {
        let all = self.point_widths.iter().chain(&self.global_widths);
        if self.n_points == 0
            || self.k_rot == 0
            || self.k_inv_dirs == 0
            || self.mlp_hidden == 0
            || all.into_iter().any(|&w| w == 0)
            || !(self.softplus_beta > 0.0)
        {
            return Err(PriorError::Format(format!("invalid prior topology {self:?}")));
        }
        Ok(())
    }
}

const LIFT_CHANNELS: usize = 3;

/// Per-point lift `[p, p·C/σ², (p × p·C)/σ³]` of centered points `p`, with
/// `C` the second-moment matrix and `σ² = tr C`. Rotation-equivariant and
/// degree-1 homogeneous in the points.
/// Returns the lifted feature, the centroid and the RMS radius.
fn lift(points: &[Vec3]) -> Result<(VecFeature, Vec3, f64), PriorError> {
    let n = points.len();
    if n == 0 {
        return Err(PriorError::DegenerateFeature("empty point set"));
    }
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let mut cov = nalgebra::Matrix3::zeros();
    for p in points {
        let q = p - centroid;
        cov += q * q.transpose();
    }
    cov /= n as f64;
    let var = cov.trace();
    if !(var > 1e-24) {
        return Err(PriorError::DegenerateFeature("all points coincide"));
    }
    let sigma = var.sqrt();
    let mut f = VecFeature::zeros(LIFT_CHANNELS, n);
    for (i, p) in points.iter().enumerate() {
        let q = p - centroid;
        let qc = cov * q;
        f.set(0, i, &q);
        f.set(1, i, &(qc / var));
        f.set(2, i, &(q.cross(&qc) / (var * sigma)));
    }
    Ok((f, centroid, sigma))
}

fn rows_to_matrix(rows: &[Vec3]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c])
}

/// Gradient of a loss with respect to each latent component.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeGrad {
    /// `K × 3`.
    pub theta_r: DMatrix<f64>,
    pub theta_inv: Vec<f64>,
    pub theta_c: Vec3,
    pub theta_s: f64,
}

impl CodeGrad {
    pub fn zeros(k: usize, n_inv: usize) -> Self {
        Self {
            theta_r: DMatrix::zeros(k, 3),
            theta_inv: vec![0.0; n_inv],
            theta_c: Vec3::zeros(),
            theta_s: 0.0,
        }
    }

    pub fn add_assign(&mut self, o: &CodeGrad) {
        self.theta_r += &o.theta_r;
        for (a, b) in self.theta_inv.iter_mut().zip(&o.theta_inv) {
            *a += b;
        }
        self.theta_c += o.theta_c;
        self.theta_s += o.theta_s;
    }
}

/// Parameter gradients in the order of [`LearnedPrior::params_mut`].
#[derive(Debug, Clone)]
pub struct PriorGrads {
    pub point: Vec<VnBlockGrads>,
    pub global: Vec<VnBlockGrads>,
    pub w_rot: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub w_center: DMatrix<f64>,
    pub log_gain: DMatrix<f64>,
    pub decoder: MlpGrads,
}

impl PriorGrads {
    pub fn into_list(self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::new();
        for b in self.point.into_iter().chain(self.global) {
            out.push(b.linear);
            out.push(b.direction);
        }
        out.push(self.w_rot);
        out.push(self.w_inv);
        out.push(self.w_center);
        out.push(self.log_gain);
        for (w, b) in self.decoder.weights.into_iter().zip(self.decoder.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }
}

/// Forward intermediates of one encode.
#[derive(Debug)]
pub struct EncoderTape {
    n: usize,
    point: VnTape,
    global: VnTape,
    f: VecFeature,
    f_hat: VecFeature,
    sigma: f64,
    a: VecFeature,
    theta_r: VecFeature,
}

/// Forward intermediates of one batched decode.
#[derive(Debug)]
pub struct DecoderTape {
    mlp: MlpTape,
    xt: DMatrix<f64>,
    psi: Vec<f64>,
    theta_r: DMatrix<f64>,
    theta_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedPrior {
    pub topology: PriorTopology,
    pub point: VnStack,
    pub global: VnStack,
    pub w_rot: DMatrix<f64>,
    pub w_inv: DMatrix<f64>,
    pub w_center: DMatrix<f64>,
    /// 1×1 log gain `γ` on `Θ_s`.
    pub log_gain: DMatrix<f64>,
    pub decoder: ScalarMlp,
}

impl LearnedPrior {
    pub fn init<R: Rng + ?Sized>(topology: PriorTopology, rng: &mut R) -> Result<Self, PriorError> {
        topology.validate()?;
        let mut pw = vec![LIFT_CHANNELS];
        pw.extend(&topology.point_widths);
        let point = VnStack::init(&pw, rng);
        let mut gw = vec![*pw.last().unwrap()];
        gw.extend(&topology.global_widths);
        let global = VnStack::init(&gw, rng);
        let c = topology.feature_width();
        let w_rot = kaiming(topology.k_rot, c, 1.0, rng);
        let w_inv = kaiming(topology.k_inv_dirs, c, 1.0, rng);
        let w_center = kaiming(1, c, 0.1, rng);
        let decoder = ScalarMlp::init(
            &MlpTopology {
                input: topology.decoder_input(),
                hidden: topology.mlp_hidden,
                depth: topology.mlp_depth,
                output: 1,
                softplus_beta: topology.softplus_beta,
            },
            rng,
        );
        Ok(Self {
            topology,
            point,
            global,
            w_rot,
            w_inv,
            w_center,
            log_gain: DMatrix::zeros(1, 1),
            decoder,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out: Vec<&mut DMatrix<f64>> = Vec::new();
        for b in self.point.blocks.iter_mut().chain(self.global.blocks.iter_mut()) {
            out.push(&mut b.linear);
            out.push(&mut b.direction);
        }
        out.push(&mut self.w_rot);
        out.push(&mut self.w_inv);
        out.push(&mut self.w_center);
        out.push(&mut self.log_gain);
        for (w, b) in self.decoder.weights.iter_mut().zip(self.decoder.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut s = self.clone();
        s.params_mut().iter().map(|m| m.shape()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Rounds parameters to `f32`, the precision they are stored at.
    pub fn quantize(&mut self) {
        for m in self.params_mut() {
            round_to_f32(m);
        }
    }

    pub fn zero_grads(&self) -> PriorGrads {
        let zero_blocks = |s: &VnStack| {
            s.blocks
                .iter()
                .map(|b| VnBlockGrads {
                    linear: DMatrix::zeros(b.linear.nrows(), b.linear.ncols()),
                    direction: DMatrix::zeros(b.direction.nrows(), b.direction.ncols()),
                })
                .collect()
        };
        PriorGrads {
            point: zero_blocks(&self.point),
            global: zero_blocks(&self.global),
            w_rot: DMatrix::zeros(self.w_rot.nrows(), self.w_rot.ncols()),
            w_inv: DMatrix::zeros(self.w_inv.nrows(), self.w_inv.ncols()),
            w_center: DMatrix::zeros(1, self.w_center.ncols()),
            log_gain: DMatrix::zeros(1, 1),
            decoder: MlpGrads {
                weights: self.decoder.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
                biases: self.decoder.biases.iter().map(|b| DMatrix::zeros(b.nrows(), 1)).collect(),
            },
        }
    }

    fn check_input(&self, points: &[Vec3]) -> Result<(), PriorError> {
        if points.len() != self.topology.n_points {
            return Err(PriorError::InputSize {
                expected: self.topology.n_points,
                got: points.len(),
            });
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(PriorError::DegenerateFeature("non-finite point"));
        }
        Ok(())
    }

    pub fn encode(&self, points: &[Vec3]) -> Result<LatentCode, PriorError> {
        self.encode_with_tape(points).map(|(c, _)| c)
    }

    pub fn encode_with_tape(&self, points: &[Vec3]) -> Result<(LatentCode, EncoderTape), PriorError> {
        self.check_input(points)?;
        let (x0, centroid, sigma) = lift(points)?;
        let (x1, point_tape) = self.point.forward_with_tape(&x0)?;
        let pooled = mean_pool(&x1);
        let (f, global_tape) = self.global.forward_with_tape(&pooled)?;
        let f_hat = f.scaled(1.0 / sigma);
        let theta_r = VecFeature(&self.w_rot * &f_hat.0);
        let a = VecFeature(&self.w_inv * &f_hat.0);
        let theta_inv = invariant_head(&a, &theta_r)?;
        let center = &self.w_center * &f.0;
        let code = LatentCode {
            theta_r: (0..theta_r.channels()).map(|c| theta_r.get(c, 0)).collect(),
            theta_inv,
            theta_c: Vec3::new(center[(0, 0)], center[(0, 1)], center[(0, 2)]) + centroid,
            theta_s: self.log_gain[(0, 0)].exp() * sigma,
        };
        let tape = EncoderTape {
            n: points.len(),
            point: point_tape,
            global: global_tape,
            f,
            f_hat,
            sigma,
            a,
            theta_r,
        };
        Ok((code, tape))
    }

    /// Accumulates encoder parameter gradients for `dcode` into `grads`.
    pub fn encoder_backward(&self, tape: EncoderTape, dcode: &CodeGrad, grads: &mut PriorGrads) -> Result<(), PriorError> {
        let (da, d_inv_r) = invariant_head_backward(&tape.a, &tape.theta_r, &dcode.theta_inv);
        let d_theta_r = &dcode.theta_r + d_inv_r;
        grads.w_rot += &d_theta_r * tape.f_hat.0.transpose();
        grads.w_inv += &da * tape.f_hat.0.transpose();
        let d_center = DMatrix::from_row_slice(1, 3, dcode.theta_c.as_slice());
        grads.w_center += &d_center * tape.f.0.transpose();
        let d_hat = self.w_rot.transpose() * &d_theta_r + self.w_inv.transpose() * &da;
        let gain = self.log_gain[(0, 0)].exp();
        grads.log_gain[(0, 0)] += dcode.theta_s * gain * tape.sigma;
        let mut df = d_hat / tape.sigma;
        df += self.w_center.transpose() * &d_center;
        let (g_global, d_pooled) = self.global.backward(tape.global, &df)?;
        let d_x1 = mean_pool_backward(&d_pooled, tape.n);
        let (g_point, _) = self.point.backward(tape.point, &d_x1)?;
        for (acc, g) in grads.point.iter_mut().zip(g_point) {
            acc.linear += g.linear;
            acc.direction += g.direction;
        }
        for (acc, g) in grads.global.iter_mut().zip(g_global) {
            acc.linear += g.linear;
            acc.direction += g.direction;
        }
        Ok(())
    }

    fn decoder_input(&self, xs: &[Vec3], code: &LatentCode) -> Result<(DMatrix<f64>, DMatrix<f64>), PriorError> {
        let t = &self.topology;
        if code.theta_r.len() != t.k_rot || code.theta_inv.len() != t.n_inv() {
            return Err(PriorError::DimensionMismatch(format!(
                "code has K={} inv={}, model expects K={} inv={}",
                code.theta_r.len(),
                code.theta_inv.len(),
                t.k_rot,
                t.n_inv()
            )));
        }
        let m = xs.len();
        let n_inv = t.n_inv();
        let mut z = DMatrix::zeros(t.decoder_input(), m);
        let mut xt = DMatrix::zeros(3, m);
        for (j, x) in xs.iter().enumerate() {
            let q = code.canonicalize(x);
            for i in 0..n_inv {
                z[(i, j)] = code.theta_inv[i];
            }
            for (k, r) in code.theta_r.iter().enumerate() {
                z[(n_inv + k, j)] = r.dot(&q);
            }
            z[(n_inv + t.k_rot, j)] = q.norm_squared();
            xt.set_column(j, &q);
        }
        Ok((z, xt))
    }

    /// Radial base term and its gradient at column `j` of `xt`; zero when disabled.
    fn radial(&self, xt: &DMatrix<f64>, j: usize) -> (f64, Vec3) {
        if !self.topology.radial_base {
            return (0.0, Vec3::zeros());
        }
        let q = Vec3::new(xt[(0, j)], xt[(1, j)], xt[(2, j)]);
        let r = q.norm();
        (r - 1.0, if r > 0.0 { q / r } else { Vec3::zeros() })
    }

    pub fn evaluate(&self, xs: &[Vec3], code: &LatentCode, with_grad: bool) -> Result<Vec<FieldSample>, PriorError> {
        let mut out = Vec::with_capacity(xs.len());
        let n_inv = self.topology.n_inv();
        let k = self.topology.k_rot;
        let theta_r = rows_to_matrix(&code.theta_r);
        for chunk in xs.chunks(DECODE_CHUNK) {
            let (z, xt) = self.decoder_input(chunk, code)?;
            if !with_grad {
                let psi = self.decoder.forward(&z)?;
                out.extend(psi.iter().enumerate().map(|(j, &p)| FieldSample {
                    psi: p + self.radial(&xt, j).0,
                    grad: Vec3::zeros(),
                }));
                continue;
            }
            let (psi, tape) = self.decoder.forward_with_tape(&z)?;
            let dz = self.decoder.input_gradient(tape, &DMatrix::from_element(1, chunk.len(), 1.0))?;
            let dh = dz.rows(n_inv, k);
            let g = theta_r.transpose() * dh;
            for j in 0..chunk.len() {
                let d2 = dz[(n_inv + k, j)];
                let (base, base_grad) = self.radial(&xt, j);
                let grad = Vec3::new(
                    g[(0, j)] + 2.0 * xt[(0, j)] * d2,
                    g[(1, j)] + 2.0 * xt[(1, j)] * d2,
                    g[(2, j)] + 2.0 * xt[(2, j)] * d2,
                ) + base_grad;
                out.push(FieldSample {
                    psi: psi[(0, j)] + base,
                    grad,
                });
            }
        }
        Ok(out)
    }

    /// Metric predictions `theta_s·Ψ` for training, with a tape for [`Self::decoder_backward`].
    pub fn decode_with_tape(&self, xs: &[Vec3], code: &LatentCode) -> Result<(Vec<f64>, DecoderTape), PriorError> {
        let (z, xt) = self.decoder_input(xs, code)?;
        let (psi, mlp) = self.decoder.forward_with_tape(&z)?;
        let psi: Vec<f64> = psi.iter().enumerate().map(|(j, &p)| p + self.radial(&xt, j).0).collect();
        let pred = psi.iter().map(|p| code.theta_s * p).collect();
        Ok((
            pred,
            DecoderTape {
                mlp,
                xt,
                psi,
                theta_r: rows_to_matrix(&code.theta_r),
                theta_s: code.theta_s,
            },
        ))
    }

    /// Accumulates decoder parameter gradients into `grads` and returns the code gradient.
    pub fn decoder_backward(&self, tape: DecoderTape, d_pred: &[f64], grads: &mut PriorGrads) -> Result<CodeGrad, PriorError> {
        let m = tape.psi.len();
        if d_pred.len() != m {
            return Err(PriorError::DimensionMismatch(format!("{} prediction gradients for {m} queries", d_pred.len())));
        }
        let n_inv = self.topology.n_inv();
        let k = self.topology.k_rot;
        let s = tape.theta_s;
        let d_psi = DMatrix::from_fn(1, m, |_, j| s * d_pred[j]);
        let mut d_s: f64 = d_pred.iter().zip(&tape.psi).map(|(d, p)| d * p).sum();
        let (g, dz) = self.decoder.backward(tape.mlp, &d_psi)?;
        for (acc, w) in grads.decoder.weights.iter_mut().zip(g.weights) {
            *acc += w;
        }
        for (acc, b) in grads.decoder.biases.iter_mut().zip(g.biases) {
            *acc += b;
        }
        let theta_inv = (0..n_inv).map(|i| dz.row(i).sum()).collect();
        let dh = dz.rows(n_inv, k).into_owned();
        let d_theta_r = &dh * tape.xt.transpose();
        let mut dxt = tape.theta_r.transpose() * &dh;
        for j in 0..m {
            let d2 = 2.0 * dz[(n_inv + k, j)];
            let base_grad = self.radial(&tape.xt, j).1;
            for r in 0..3 {
                dxt[(r, j)] += d2 * tape.xt[(r, j)] + d_psi[(0, j)] * base_grad[r];
            }
        }
        let mut d_c = Vec3::zeros();
        for j in 0..m {
            let col = Vec3::new(dxt[(0, j)], dxt[(1, j)], dxt[(2, j)]);
            d_c -= col / s;
            d_s -= col.dot(&Vec3::new(tape.xt[(0, j)], tape.xt[(1, j)], tape.xt[(2, j)])) / s;
        }
        Ok(CodeGrad {
            theta_r: d_theta_r,
            theta_inv,
            theta_c: d_c,
            theta_s: d_s,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let topo = serde_json::to_value(&self.topology).expect("topology serializes");
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, topo);
        for (prefix, stack) in [("point", &self.point), ("global", &self.global)] {
            for (i, b) in stack.blocks.iter().enumerate() {
                ck.push(format!("{prefix}.{i}.linear"), &b.linear);
                ck.push(format!("{prefix}.{i}.direction"), &b.direction);
            }
        }
        ck.push("head.rot", &self.w_rot);
        ck.push("head.inv", &self.w_inv);
        ck.push("head.center", &self.w_center);
        ck.push("head.scale", &self.log_gain);
        for (i, (w, b)) in self.decoder.weights.iter().zip(&self.decoder.biases).enumerate() {
            ck.push(format!("decoder.{i}.weight"), w);
            ck.push(format!("decoder.{i}.bias"), b);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PriorError> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(PriorError::Format(format!("checkpoint kind {:?} is not a prior", ck.kind)));
        }
        let topology: PriorTopology =
            serde_json::from_value(ck.topology.clone()).map_err(|e| PriorError::Format(format!("topology: {e}")))?;
        topology.validate()?;
        // Shapes come from a fresh model of the same topology.
        let mut model = Self::init(topology, &mut crate::geometry::rng_from_seed(0))?;
        let load = |name: String, like: &DMatrix<f64>| ck.tensor(&name, like.nrows(), like.ncols());
        for (prefix, stack) in [("point", &mut model.point), ("global", &mut model.global)] {
            for (i, b) in stack.blocks.iter_mut().enumerate() {
                *b = VnBlock {
                    linear: load(format!("{prefix}.{i}.linear"), &b.linear)?,
                    direction: load(format!("{prefix}.{i}.direction"), &b.direction)?,
                };
            }
        }
        model.w_rot = load("head.rot".into(), &model.w_rot)?;
        model.w_inv = load("head.inv".into(), &model.w_inv)?;
        model.w_center = load("head.center".into(), &model.w_center)?;
        model.log_gain = load("head.scale".into(), &model.log_gain)?;
        for i in 0..model.decoder.weights.len() {
            model.decoder.weights[i] = load(format!("decoder.{i}.weight"), &model.decoder.weights[i])?;
            model.decoder.biases[i] = load(format!("decoder.{i}.bias"), &model.decoder.biases[i])?;
        }
        Ok(model)
    }

    pub fn save_file(&self, path: &Path) -> Result<(), PriorError> {
        self.to_checkpoint().write(BufWriter::new(File::create(path)?))?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self, PriorError> {
        let ck = Checkpoint::read(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(&ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rng_from_seed, EfemRng, Sim3Transform};
    use crate::prior::PriorModel;
    use rand::Rng;

    fn small_topology() -> PriorTopology {
        PriorTopology {
            n_points: 64,
            point_widths: vec![8, 8],
            global_widths: vec![12],
            k_rot: 4,
            k_inv_dirs: 2,
            mlp_hidden: 16,
            mlp_depth: 2,
            softplus_beta: 10.0,
            radial_base: true,
        }
    }

    fn blob(n: usize, rng: &mut EfemRng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), 0.5 * rng.random_range(-1.0..1.0), 0.2 * rng.random_range(-1.0..1.0)))
            .collect()
    }

    fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn initial_scale_is_the_rms_radius() {
        let model = LearnedPrior::init(small_topology(), &mut rng_from_seed(3)).unwrap();
        let pts = blob(64, &mut rng_from_seed(4));
        let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / 64.0;
        let rms = (pts.iter().map(|p| (p - c).norm_squared()).sum::<f64>() / 64.0).sqrt();
        assert!((model.encode(&pts).unwrap().theta_s - rms).abs() < 1e-12);
    }

    #[test]
    fn symmetric_input_has_vanishing_rotation_channels() {
        let model = LearnedPrior::init(small_topology(), &mut rng_from_seed(3)).unwrap();
        let code = model.encode(&unit_sphere(64)).unwrap();
        assert!((code.theta_s - 1.0).abs() < 1e-3);
        assert!(code.theta_r.iter().all(|r| r.norm() < 0.05));
    }

    /// Fibonacci points on the unit sphere.
    fn unit_sphere(n: usize) -> Vec<Vec3> {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - z * z).sqrt();
                let t = golden * i as f64;
                Vec3::new(rho * t.cos(), rho * t.sin(), z)
            })
            .collect()
    }

    #[test]
    fn encode_commutes_with_sim3() {
        let mut rng = rng_from_seed(1);
        let model = LearnedPrior::init(small_topology(), &mut rng).unwrap();
        for _ in 0..20 {
            let pts = blob(64, &mut rng);
            let g = Sim3Transform::random(&mut rng, (0.25, 4.0), 2.0);
            let moved: Vec<Vec3> = pts.iter().map(|p| g.apply_point(p)).collect();
            let a = model.encode(&moved).unwrap();
            let b = model.encode(&pts).unwrap().act(&g);
            let ra: Vec<f64> = a.theta_r.iter().flat_map(|v| v.iter().copied()).collect();
            let rb: Vec<f64> = b.theta_r.iter().flat_map(|v| v.iter().copied()).collect();
            assert!(rel_vec(&ra, &rb) < 1e-9);
            assert!(rel_vec(&a.theta_inv, &b.theta_inv) < 1e-9);
            assert!((a.theta_c - b.theta_c).norm() < 1e-9 * (1.0 + b.theta_c.norm()));
            assert!((a.theta_s / b.theta_s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_is_invariant_and_gradient_is_equivariant() {
        let mut rng = rng_from_seed(2);
        let model = PriorModel::Learned(Box::new(LearnedPrior::init(small_topology(), &mut rng).unwrap()));
        let code = model.encode(&blob(64, &mut rng)).unwrap();
        for _ in 0..20 {
            let g = Sim3Transform::random(&mut rng, (0.25, 4.0), 2.0);
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let moved = code.act(&g);
            let a = model.decode(&g.apply_point(&x), &moved).unwrap();
            let b = model.decode(&x, &code).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            let ga = model.decode_gradient(&g.apply_point(&x), &moved).unwrap();
            let gb = g.rotate(&model.decode_gradient(&x, &code).unwrap());
            assert!((ga - gb).norm() < 1e-9 * (1.0 + gb.norm()));
        }
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(3);
        let model = PriorModel::Learned(Box::new(LearnedPrior::init(small_topology(), &mut rng).unwrap()));
        let code = model.encode(&blob(64, &mut rng)).unwrap();
        let h = 1e-4 * code.theta_s;
        let mut ok = 0;
        let mut total = 0;
        for _ in 0..30 {
            let x = code.theta_c + code.theta_s * Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let g = model.decode_gradient(&x, &code).unwrap();
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = h;
                let fd = (model.decode_metric(&(x + e), &code).unwrap() - model.decode_metric(&(x - e), &code).unwrap()) / (2.0 * h);
                total += 1;
                if (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6) < 1e-3 {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }

    /// Loss `Σ_j w_j·pred_j + ⟨u, code⟩` through encoder and decoder.
    fn scalar_loss(model: &LearnedPrior, pts: &[Vec3], qs: &[Vec3], w: &[f64]) -> f64 {
        let code = model.encode(pts).unwrap();
        let (pred, _) = model.decode_with_tape(qs, &code).unwrap();
        pred.iter().zip(w).map(|(p, q)| p * q).sum::<f64>() + 0.3 * code.theta_s + 0.2 * code.theta_c.x
    }

    #[test]
    fn end_to_end_parameter_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(4);
        let model = LearnedPrior::init(small_topology(), &mut rng).unwrap();
        let pts = blob(64, &mut rng);
        let qs = blob(10, &mut rng);
        let w: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut grads = model.zero_grads();
        let (code, etape) = model.encode_with_tape(&pts).unwrap();
        let (_, dtape) = model.decode_with_tape(&qs, &code).unwrap();
        let mut dcode = model.decoder_backward(dtape, &w, &mut grads).unwrap();
        dcode.theta_s += 0.3;
        dcode.theta_c.x += 0.2;
        model.encoder_backward(etape, &dcode, &mut grads).unwrap();
        let analytic = grads.into_list();

        let h = 1e-4;
        let mut ok = 0;
        let mut total = 0;
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            let len = analytic[t].len();
            // Probe a handful of coordinates per tensor.
            for _ in 0..len.min(6) {
                let i = rng.random_range(0..len);
                let mut mp = model.clone();
                let base = mp.params_mut()[t][i];
                mp.params_mut()[t][i] = base + h;
                let fp = scalar_loss(&mp, &pts, &qs, &w);
                mp.params_mut()[t][i] = base - h;
                let fm = scalar_loss(&mp, &pts, &qs, &w);
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[t][i];
                total += 1;
                if (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-3 {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_quantized_model() {
        let mut rng = rng_from_seed(5);
        let mut model = LearnedPrior::init(small_topology(), &mut rng).unwrap();
        model.quantize();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save_file(&path).unwrap();
        let back = LearnedPrior::load_file(&path).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn wrong_input_size_and_degenerate_input() {
        let mut rng = rng_from_seed(6);
        let model = LearnedPrior::init(small_topology(), &mut rng).unwrap();
        assert!(matches!(model.encode(&blob(10, &mut rng)), Err(PriorError::InputSize { .. })));
        assert!(matches!(
            model.encode(&vec![Vec3::x(); 64]),
            Err(PriorError::DegenerateFeature(_))
        ));
    }
}
