use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::kaiming;
use super::VecNetError;

/// `softplus_β(x) = ln(1 + e^{βx})/β`, computed without overflow.
#[inline]
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

/// Derivative of [`softplus`]: the logistic function of `βx`.
#[inline]
pub fn softplus_grad(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpTopology {
    pub input: usize,
    pub hidden: usize,
    pub depth: usize,
    pub output: usize,
    pub softplus_beta: f64,
}

/// Affine layers with softplus between them; the last layer is affine only.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMlp {
    pub weights: Vec<DMatrix<f64>>,
    /// Column vectors, one per layer.
    pub biases: Vec<DMatrix<f64>>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DMatrix<f64>>,
}

/// Layer inputs and pre-activations of one batched forward pass.
#[derive(Debug)]
pub struct MlpTape {
    shapes: Vec<(usize, usize)>,
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

impl ScalarMlp {
    /// `depth` hidden layers of width `hidden`; depth 0 is a single affine map.
    pub fn init<R: Rng + ?Sized>(topo: &MlpTopology, rng: &mut R) -> Self {
        let mut widths = vec![topo.input];
        widths.extend(std::iter::repeat_n(topo.hidden, topo.depth));
        widths.push(topo.output);
        let last = widths.len() - 2;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            let gain = if i == last { 1.0 } else { 2f64.sqrt() };
            weights.push(kaiming(w[1], w[0], gain, rng));
            biases.push(DMatrix::zeros(w[1], 1));
        }
        Self {
            weights,
            biases,
            beta: topo.softplus_beta,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.last().map_or(0, |w| w.nrows())
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.weights.iter().map(|w| w.shape()).collect()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), VecNetError> {
        if x.nrows() != self.input_width() {
            return Err(VecNetError::Shape {
                op: "scalar_mlp",
                expected: format!("{} input rows", self.input_width()),
                got: format!("{}", x.nrows()),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[l] * h;
        let b = &self.biases[l];
        for mut col in z.column_iter_mut() {
            col += b.column(0);
        }
        z
    }

    /// Batched forward: `x` holds one input per column.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, VecNetError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for l in 0..=last {
            h = self.affine(l, &h);
            if l < last {
                h.apply(|v| *v = softplus(*v, self.beta));
            }
        }
        Ok(h)
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, VecNetError> {
        let out = self.forward(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out.iter().copied().collect())
    }

    pub fn forward_with_tape(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpTape), VecNetError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut tape = MlpTape {
            shapes: self.shapes(),
            inputs: Vec::with_capacity(last + 1),
            pre: Vec::with_capacity(last),
        };
        let mut h = x.clone();
        for l in 0..=last {
            let z = self.affine(l, &h);
            tape.inputs.push(h);
            if l < last {
                h = z.map(|v| softplus(v, self.beta));
                tape.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, tape))
    }

    fn check_tape(&self, tape: &MlpTape, dy: &DMatrix<f64>) -> Result<(), VecNetError> {
        if tape.shapes != self.shapes() {
            return Err(VecNetError::TapeMismatch("mlp topology differs".into()));
        }
        let batch = tape.inputs[0].ncols();
        if dy.shape() != (self.output_width(), batch) {
            return Err(VecNetError::TapeMismatch(format!(
                "output gradient {:?}, expected {:?}",
                dy.shape(),
                (self.output_width(), batch)
            )));
        }
        Ok(())
    }

    /// Parameter and input gradients of `Σ dy ⊙ output`.
    pub fn backward(&self, tape: MlpTape, dy: &DMatrix<f64>) -> Result<(MlpGrads, DMatrix<f64>), VecNetError> {
        self.check_tape(&tape, dy)?;
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut g = dy.clone();
        for l in (0..n).rev() {
            if l < n - 1 {
                let beta = self.beta;
                g.zip_apply(&tape.pre[l], |gv, z| *gv *= softplus_grad(z, beta));
            }
            gw.push(&g * tape.inputs[l].transpose());
            gb.push(DMatrix::from_fn(g.nrows(), 1, |r, _| g.row(r).sum()));
            g = self.weights[l].transpose() * &g;
        }
        gw.reverse();
        gb.reverse();
        Ok((MlpGrads { weights: gw, biases: gb }, g))
    }

    /// Input gradient only; skips the parameter outer products.
    pub fn input_gradient(&self, tape: MlpTape, dy: &DMatrix<f64>) -> Result<DMatrix<f64>, VecNetError> {
        self.check_tape(&tape, dy)?;
        let n = self.weights.len();
        let mut g = dy.clone();
        for l in (0..n).rev() {
            if l < n - 1 {
                let beta = self.beta;
                g.zip_apply(&tape.pre[l], |gv, z| *gv *= softplus_grad(z, beta));
            }
            g = self.weights[l].transpose() * &g;
        }
        Ok(g)
    }
}
