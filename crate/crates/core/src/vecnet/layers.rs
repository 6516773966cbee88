//! Vector-neuron layers and their exact reverse-mode derivatives.
//!
//! Every vector layer acts on the channel axis only, so `L(F·R) = L(F)·R`
//! holds for any rotation `R` up to floating-point rounding.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{VecFeature, VecNetError};

/// Directions shorter than this leave the channel untouched.
pub const MIN_DIRECTION_NORM: f64 = 1e-12;
/// Channel norms at or below this count as zero in [`channel_normalize`].
pub const MIN_CHANNEL_NORM: f64 = 1e-12;

/// Fan-in scaled Gaussian weights: entries `N(0, gain²/cols)`.
pub fn kaiming<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let std = gain / (cols.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn check_cols(op: &'static str, w: &DMatrix<f64>, f: &VecFeature) -> Result<(), VecNetError> {
    if w.ncols() != f.channels() {
        return Err(VecNetError::Shape {
            op,
            expected: format!("{} input channels", w.ncols()),
            got: format!("{}", f.channels()),
        });
    }
    Ok(())
}

/// `F' = W·F`: output channel `j` is `Σ_i W[j,i]·F_i`.
pub fn vn_linear(w: &DMatrix<f64>, f: &VecFeature) -> Result<VecFeature, VecNetError> {
    check_cols("vn_linear", w, f)?;
    Ok(VecFeature(w * &f.0))
}

/// Gradients of `vn_linear` given the upstream gradient `dy`: `(dW, dF)`.
pub fn vn_linear_backward(w: &DMatrix<f64>, f: &VecFeature, dy: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (dy * f.0.transpose(), w.transpose() * dy)
}

#[inline]
fn relu_channel(f: [f64; 3], d: [f64; 3]) -> [f64; 3] {
    let q = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let a = f[0] * d[0] + f[1] * d[1] + f[2] * d[2];
    if q < MIN_DIRECTION_NORM * MIN_DIRECTION_NORM || a >= 0.0 {
        return f;
    }
    let k = a / q;
    [f[0] - k * d[0], f[1] - k * d[1], f[2] - k * d[2]]
}

/// VN-ReLU on precomputed directions `d` (same shape as `f`).
pub fn vn_relu_with_directions(f: &VecFeature, d: &VecFeature) -> VecFeature {
    let mut out = f.clone();
    let (c, n) = (f.channels(), f.points());
    for p in 0..n {
        for ch in 0..c {
            let fv = [f.0[(ch, 3 * p)], f.0[(ch, 3 * p + 1)], f.0[(ch, 3 * p + 2)]];
            let dv = [d.0[(ch, 3 * p)], d.0[(ch, 3 * p + 1)], d.0[(ch, 3 * p + 2)]];
            let o = relu_channel(fv, dv);
            for k in 0..3 {
                out.0[(ch, 3 * p + k)] = o[k];
            }
        }
    }
    out
}

/// VN-ReLU with learned directions `d_c = (W_d·F)_c`.
///
/// Channels with `⟨F_c, d_c⟩ ≥ 0` pass through; the others lose their
/// component along `d̂_c`.
pub fn vn_nonlinear(f: &VecFeature, w_dir: &DMatrix<f64>) -> Result<VecFeature, VecNetError> {
    let d = vn_linear(w_dir, f)?;
    if d.channels() != f.channels() {
        return Err(VecNetError::Shape {
            op: "vn_nonlinear",
            expected: format!("{} direction channels", f.channels()),
            got: format!("{}", d.channels()),
        });
    }
    Ok(vn_relu_with_directions(f, &d))
}

/// Gradients of [`vn_relu_with_directions`] with respect to `f` and `d`.
pub fn vn_relu_backward(f: &VecFeature, d: &VecFeature, dy: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut df = dy.clone();
    let mut dd = DMatrix::zeros(d.0.nrows(), d.0.ncols());
    let (c, n) = (f.channels(), f.points());
    for p in 0..n {
        for ch in 0..c {
            let fv = f.get(ch, p);
            let dv = d.get(ch, p);
            let q = dv.norm_squared();
            let a = fv.dot(&dv);
            if q < MIN_DIRECTION_NORM * MIN_DIRECTION_NORM || a >= 0.0 {
                continue;
            }
            let g = nalgebra::Vector3::new(dy[(ch, 3 * p)], dy[(ch, 3 * p + 1)], dy[(ch, 3 * p + 2)]);
            let gd = g.dot(&dv);
            let dfv = g - dv * (gd / q);
            let ddv = -(fv * (gd / q) + g * (a / q) - dv * (2.0 * a * gd / (q * q)));
            for k in 0..3 {
                df[(ch, 3 * p + k)] = dfv[k];
                dd[(ch, 3 * p + k)] = ddv[k];
            }
        }
    }
    (df, dd)
}

/// Splits `F` into a unit-mean-norm feature and its scale `(1/C)·Σ_c ‖F_c‖`.
///
/// Defined for single-point features. `channel_normalize(s·F) = (F̂, s·scale)`.
pub fn channel_normalize(f: &VecFeature) -> Result<(VecFeature, f64), VecNetError> {
    let c = f.channels();
    let norms: Vec<f64> = (0..c).map(|ch| f.0.row(ch).norm()).collect();
    if c == 0 || norms.iter().all(|&n| n <= MIN_CHANNEL_NORM) {
        return Err(VecNetError::DegenerateFeature);
    }
    let scale = norms.iter().sum::<f64>() / c as f64;
    Ok((f.scaled(1.0 / scale), scale))
}

/// Gradient of [`channel_normalize`] given upstream gradients for both outputs.
pub fn channel_normalize_backward(f: &VecFeature, scale: f64, d_hat: &DMatrix<f64>, d_scale: f64) -> DMatrix<f64> {
    let c = f.channels() as f64;
    // Total derivative with respect to the scale, through both outputs.
    let ds = d_scale - d_hat.dot(&f.0) / (scale * scale);
    let mut df = d_hat / scale;
    for ch in 0..f.channels() {
        let n = f.0.row(ch).norm();
        if n > 0.0 {
            let coef = ds / (c * n);
            for k in 0..f.0.ncols() {
                df[(ch, k)] += coef * f.0[(ch, k)];
            }
        }
    }
    df
}

/// All channel-pair inner products `⟨A_i, B_j⟩`, flattened row-major over `(i, j)`.
pub fn invariant_head(a: &VecFeature, b: &VecFeature) -> Result<Vec<f64>, VecNetError> {
    if a.0.ncols() != b.0.ncols() {
        return Err(VecNetError::Shape {
            op: "invariant_head",
            expected: format!("{} columns", a.0.ncols()),
            got: format!("{}", b.0.ncols()),
        });
    }
    let g = &a.0 * b.0.transpose();
    let mut out = Vec::with_capacity(g.len());
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            out.push(g[(i, j)]);
        }
    }
    Ok(out)
}

/// Gradients of [`invariant_head`]: `(dA, dB)` from the flat output gradient.
pub fn invariant_head_backward(a: &VecFeature, b: &VecFeature, d_out: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = DMatrix::from_row_slice(a.channels(), b.channels(), d_out);
    (&g * &b.0, g.transpose() * &a.0)
}

/// Channel-wise mean over points: `C × 3n → C × 3`.
pub fn mean_pool(f: &VecFeature) -> VecFeature {
    let n = f.points();
    let mut out = DMatrix::zeros(f.channels(), 3);
    for p in 0..n {
        out += f.0.columns(3 * p, 3);
    }
    VecFeature(out / n as f64)
}

/// Spreads a pooled gradient evenly back over `n` points.
pub fn mean_pool_backward(d_out: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(d_out.nrows(), 3 * n);
    let g = d_out / n as f64;
    for p in 0..n {
        d.columns_mut(3 * p, 3).copy_from(&g);
    }
    d
}

/// One `vn_linear` followed by `vn_nonlinear` on its output.
#[derive(Debug, Clone, PartialEq)]
pub struct VnBlock {
    pub linear: DMatrix<f64>,
    pub direction: DMatrix<f64>,
}

/// Parameter gradients of one [`VnBlock`].
#[derive(Debug, Clone)]
pub struct VnBlockGrads {
    pub linear: DMatrix<f64>,
    pub direction: DMatrix<f64>,
}

/// Sequence of [`VnBlock`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct VnStack {
    pub blocks: Vec<VnBlock>,
}

/// Forward intermediates of one [`VnStack`] pass.
#[derive(Debug)]
pub struct VnTape {
    shapes: Vec<(usize, usize)>,
    inputs: Vec<VecFeature>,
    pre: Vec<VecFeature>,
    dirs: Vec<VecFeature>,
}

impl VnStack {
    /// `widths = [c_in, c_1, …, c_k]`.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        let blocks = widths
            .windows(2)
            .map(|w| VnBlock {
                linear: kaiming(w[1], w[0], 2f64.sqrt(), rng),
                direction: kaiming(w[1], w[1], 1.0, rng),
            })
            .collect();
        Self { blocks }
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.blocks.last().map(|b| b.linear.nrows())
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.blocks.iter().map(|b| b.linear.shape()).collect()
    }

    pub fn forward(&self, x: &VecFeature) -> Result<VecFeature, VecNetError> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = vn_nonlinear(&vn_linear(&b.linear, &h)?, &b.direction)?;
        }
        Ok(h)
    }

    pub fn forward_with_tape(&self, x: &VecFeature) -> Result<(VecFeature, VnTape), VecNetError> {
        let mut tape = VnTape {
            shapes: self.shapes(),
            inputs: Vec::with_capacity(self.blocks.len()),
            pre: Vec::with_capacity(self.blocks.len()),
            dirs: Vec::with_capacity(self.blocks.len()),
        };
        let mut h = x.clone();
        for b in &self.blocks {
            let y = vn_linear(&b.linear, &h)?;
            let d = vn_linear(&b.direction, &y)?;
            let out = vn_relu_with_directions(&y, &d);
            tape.inputs.push(h);
            tape.pre.push(y);
            tape.dirs.push(d);
            h = out;
        }
        Ok((h, tape))
    }

    /// Parameter gradients per block and the input gradient.
    pub fn backward(&self, tape: VnTape, dy: &DMatrix<f64>) -> Result<(Vec<VnBlockGrads>, DMatrix<f64>), VecNetError> {
        if tape.shapes != self.shapes() {
            return Err(VecNetError::TapeMismatch("vector stack topology differs".into()));
        }
        let mut g = dy.clone();
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate().rev() {
            if g.shape() != tape.pre[i].0.shape() {
                return Err(VecNetError::TapeMismatch(format!("gradient shape {:?} at block {i}", g.shape())));
            }
            let (dy_lin, dd) = vn_relu_backward(&tape.pre[i], &tape.dirs[i], &g);
            let (dw_dir, dy_dir) = vn_linear_backward(&b.direction, &tape.pre[i], &dd);
            let dy_total = dy_lin + dy_dir;
            let (dw_lin, dx) = vn_linear_backward(&b.linear, &tape.inputs[i], &dy_total);
            grads.push(VnBlockGrads {
                linear: dw_lin,
                direction: dw_dir,
            });
            g = dx;
        }
        grads.reverse();
        Ok((grads, g))
    }
}
