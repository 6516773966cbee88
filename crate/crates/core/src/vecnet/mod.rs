//! Vector-neuron layers, a softplus MLP, manual backpropagation and Adam.
//!
//! Vector features are `C × 3n` matrices ([`VecFeature`]); scalar batches are
//! `width × batch` matrices with one sample per column.

mod adam;
mod checkpoint;
mod feature;
mod layers;
mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{round_to_f32, Checkpoint, TensorInfo, FORMAT_VERSION, MAGIC};
pub use feature::VecFeature;
pub use layers::{
    channel_normalize, channel_normalize_backward, invariant_head, invariant_head_backward, kaiming, mean_pool,
    mean_pool_backward, vn_linear, vn_linear_backward, vn_nonlinear, vn_relu_backward, vn_relu_with_directions,
    VnBlock, VnBlockGrads, VnStack, VnTape, MIN_CHANNEL_NORM, MIN_DIRECTION_NORM,
};
pub use mlp::{softplus, softplus_grad, MlpGrads, MlpTape, MlpTopology, ScalarMlp};

#[derive(Debug, thiserror::Error)]
pub enum VecNetError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("degenerate feature: every channel is numerically zero")]
    DegenerateFeature,
    #[error("tape does not match the network: {0}")]
    TapeMismatch(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, rng_from_seed, EfemRng, Mat3};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut EfemRng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_feat(c: usize, n: usize, rng: &mut EfemRng) -> VecFeature {
        VecFeature(rand_mat(c, 3 * n, rng))
    }

    /// Fraction of coordinates where the analytic and central-difference
    /// derivatives agree to relative 1e-3.
    fn gradcheck(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
        let h = 1e-4;
        let mut ok = 0;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            let num = (fp - fm) / (2.0 * h);
            let den = num.abs().max(analytic[i].abs()).max(1e-6);
            if (num - analytic[i]).abs() / den < 1e-3 {
                ok += 1;
            }
        }
        ok as f64 / x.len() as f64
    }

    fn flat(m: &DMatrix<f64>) -> Vec<f64> {
        m.iter().copied().collect()
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn vn_linear_identity_and_zero() {
        let mut rng = rng_from_seed(1);
        let f = rand_feat(4, 2, &mut rng);
        assert_eq!(vn_linear(&DMatrix::identity(4, 4), &f).unwrap(), f);
        assert_eq!(vn_linear(&DMatrix::zeros(3, 4), &f).unwrap().norm(), 0.0);
        assert!(vn_linear(&DMatrix::zeros(3, 5), &f).is_err());
    }

    #[test]
    fn vn_relu_hand_cases() {
        let d = VecFeature::from_channels(&[nalgebra::Vector3::new(0.0, 2.0, 0.0)]);
        let aligned = VecFeature::from_channels(&[nalgebra::Vector3::new(0.3, 1.0, 0.0)]);
        assert_eq!(vn_relu_with_directions(&aligned, &d), aligned);
        let opposite = VecFeature::from_channels(&[nalgebra::Vector3::new(0.0, -1.0, 0.0)]);
        assert!(vn_relu_with_directions(&opposite, &d).norm() < 1e-15);
        let tiny = VecFeature::from_channels(&[nalgebra::Vector3::new(0.0, 1e-13, 0.0)]);
        assert_eq!(vn_relu_with_directions(&opposite, &tiny), opposite);
    }

    #[test]
    fn vector_layers_are_rotation_equivariant() {
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let r: Mat3 = random_rotation(&mut rng);
            let f = rand_feat(6, 3, &mut rng);
            let w = rand_mat(5, 6, &mut rng);
            let a = vn_linear(&w, &f.rotate(&r)).unwrap();
            let b = vn_linear(&w, &f).unwrap().rotate(&r);
            assert!(rel(&a.0, &b.0) < 1e-12);
            let wd = rand_mat(6, 6, &mut rng);
            let a = vn_nonlinear(&f.rotate(&r), &wd).unwrap();
            let b = vn_nonlinear(&f, &wd).unwrap().rotate(&r);
            assert!(rel(&a.0, &b.0) < 1e-10);
            let stack = VnStack::init(&[6, 8, 4], &mut rng);
            let a = stack.forward(&f.rotate(&r)).unwrap();
            let b = stack.forward(&f).unwrap().rotate(&r);
            assert!(rel(&a.0, &b.0) < 1e-10);
        }
    }

    #[test]
    fn channel_normalize_properties() {
        let mut rng = rng_from_seed(3);
        let unit = VecFeature::from_channels(&[nalgebra::Vector3::x(), nalgebra::Vector3::new(0.6, 0.8, 0.0)]);
        let (n, s) = channel_normalize(&unit).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(rel(&n.0, &unit.0) < 1e-15);
        for _ in 0..50 {
            let f = rand_feat(7, 1, &mut rng);
            let k = rng.random_range(0.1..10.0);
            let (a, sa) = channel_normalize(&f).unwrap();
            let (b, sb) = channel_normalize(&f.scaled(k)).unwrap();
            assert!(rel(&b.0, &a.0) < 1e-12);
            assert!((sb / sa - k).abs() < 1e-12 * k);
            assert!(rel(&a.scaled(sa).0, &f.0) < 1e-12);
        }
        assert!(matches!(
            channel_normalize(&VecFeature::zeros(3, 1)),
            Err(VecNetError::DegenerateFeature)
        ));
    }

    #[test]
    fn invariant_head_cases() {
        let mut rng = rng_from_seed(4);
        let a = rand_feat(4, 1, &mut rng);
        let b = rand_feat(5, 1, &mut rng);
        let r = random_rotation(&mut rng);
        let x = invariant_head(&a, &b).unwrap();
        let y = invariant_head(&a.rotate(&r), &b.rotate(&r)).unwrap();
        assert_eq!(x.len(), 20);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
        let e = VecFeature::from_channels(&[nalgebra::Vector3::x(), nalgebra::Vector3::y()]);
        assert_eq!(invariant_head(&e, &e).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let z = VecFeature::from_channels(&[nalgebra::Vector3::z()]);
        assert_eq!(invariant_head(&e, &z).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn vn_stack_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(35);
        let stack = VnStack::init(&[3, 6, 5], &mut rng);
        let x = rand_feat(3, 4, &mut rng);
        let g = rand_mat(5, 12, &mut rng);
        let loss = |s: &VnStack, x: &VecFeature| s.forward(x).unwrap().0.dot(&g);
        let (_, tape) = stack.forward_with_tape(&x).unwrap();
        let (grads, dx) = stack.backward(tape, &g).unwrap();

        let frac = gradcheck(
            |v| loss(&stack, &VecFeature(DMatrix::from_column_slice(3, 12, v))),
            &flat(&x.0),
            &flat(&dx),
        );
        assert!(frac >= 0.95, "input {frac}");
        for b in 0..2 {
            for which in 0..2 {
                let base = if which == 0 { &stack.blocks[b].linear } else { &stack.blocks[b].direction };
                let shape = base.shape();
                let an = if which == 0 { &grads[b].linear } else { &grads[b].direction };
                let frac = gradcheck(
                    |v| {
                        let mut s = stack.clone();
                        let m = DMatrix::from_column_slice(shape.0, shape.1, v);
                        if which == 0 {
                            s.blocks[b].linear = m;
                        } else {
                            s.blocks[b].direction = m;
                        }
                        loss(&s, &x)
                    },
                    &flat(base),
                    &flat(an),
                );
                assert!(frac >= 0.95, "block {b} tensor {which}: {frac}");
            }
        }
    }

    #[test]
    fn normalize_and_head_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(6);
        let f = rand_feat(5, 1, &mut rng);
        let gh = rand_mat(5, 3, &mut rng);
        let gs = 0.7;
        let loss = |v: &[f64]| {
            let (n, s) = channel_normalize(&VecFeature(DMatrix::from_column_slice(5, 3, v))).unwrap();
            n.0.dot(&gh) + gs * s
        };
        let (_, s) = channel_normalize(&f).unwrap();
        let df = channel_normalize_backward(&f, s, &gh, gs);
        assert!(gradcheck(loss, &flat(&f.0), &flat(&df)) >= 0.95);

        let a = rand_feat(3, 1, &mut rng);
        let b = rand_feat(4, 1, &mut rng);
        let go: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (da, db) = invariant_head_backward(&a, &b, &go);
        let la = |v: &[f64]| {
            let out = invariant_head(&VecFeature(DMatrix::from_column_slice(3, 3, v)), &b).unwrap();
            out.iter().zip(&go).map(|(p, q)| p * q).sum::<f64>()
        };
        let lb = |v: &[f64]| {
            let out = invariant_head(&a, &VecFeature(DMatrix::from_column_slice(4, 3, v))).unwrap();
            out.iter().zip(&go).map(|(p, q)| p * q).sum::<f64>()
        };
        assert!(gradcheck(la, &flat(&a.0), &flat(&da)) >= 0.95);
        assert!(gradcheck(lb, &flat(&b.0), &flat(&db)) >= 0.95);

        let x = rand_feat(2, 5, &mut rng);
        let gp = rand_mat(2, 3, &mut rng);
        let dx = mean_pool_backward(&gp, 5);
        let lp = |v: &[f64]| mean_pool(&VecFeature(DMatrix::from_column_slice(2, 15, v))).0.dot(&gp);
        assert!(gradcheck(lp, &flat(&x.0), &flat(&dx)) >= 0.95);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(7);
        let topo = MlpTopology {
            input: 5,
            hidden: 8,
            depth: 2,
            output: 2,
            softplus_beta: 10.0,
        };
        let mlp = ScalarMlp::init(&topo, &mut rng);
        let x = rand_mat(5, 3, &mut rng);
        let g = rand_mat(2, 3, &mut rng);
        let (_, tape) = mlp.forward_with_tape(&x).unwrap();
        let (grads, dx) = mlp.backward(tape, &g).unwrap();
        let (_, tape) = mlp.forward_with_tape(&x).unwrap();
        assert_eq!(mlp.input_gradient(tape, &g).unwrap(), dx);

        let lx = |v: &[f64]| mlp.forward(&DMatrix::from_column_slice(5, 3, v)).unwrap().dot(&g);
        assert!(gradcheck(lx, &flat(&x), &flat(&dx)) >= 0.95);
        for l in 0..3 {
            let shape = mlp.weights[l].shape();
            let lw = |v: &[f64]| {
                let mut m = mlp.clone();
                m.weights[l] = DMatrix::from_column_slice(shape.0, shape.1, v);
                m.forward(&x).unwrap().dot(&g)
            };
            assert!(gradcheck(lw, &flat(&mlp.weights[l]), &flat(&grads.weights[l])) >= 0.95);
            let lb = |v: &[f64]| {
                let mut m = mlp.clone();
                m.biases[l] = DMatrix::from_column_slice(shape.0, 1, v);
                m.forward(&x).unwrap().dot(&g)
            };
            assert!(gradcheck(lb, &flat(&mlp.biases[l]), &flat(&grads.biases[l])) >= 0.95);
        }
    }

    #[test]
    fn single_affine_layer_closed_form_gradient() {
        let mut rng = rng_from_seed(8);
        let topo = MlpTopology {
            input: 4,
            hidden: 0,
            depth: 0,
            output: 3,
            softplus_beta: 1.0,
        };
        let mut mlp = ScalarMlp::init(&topo, &mut rng);
        mlp.weights[0] = DMatrix::identity(3, 4);
        assert_eq!(mlp.forward_one(&[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        mlp.weights[0] = rand_mat(3, 4, &mut rng);
        let x = rand_mat(4, 1, &mut rng);
        // Loss ‖Wx‖²/2 has dL/dW = (Wx)xᵀ.
        let (y, tape) = mlp.forward_with_tape(&x).unwrap();
        let (grads, _) = mlp.backward(tape, &y).unwrap();
        assert!(rel(&grads.weights[0], &(&y * x.transpose())) < 1e-14);
        let (_, tape) = mlp.forward_with_tape(&x).unwrap();
        let (grads, dx) = mlp.backward(tape, &DMatrix::zeros(3, 1)).unwrap();
        assert_eq!(grads.weights[0].norm() + grads.biases[0].norm() + dx.norm(), 0.0);
    }

    #[test]
    fn mismatched_tape_is_rejected() {
        let mut rng = rng_from_seed(9);
        let a = VnStack::init(&[3, 4], &mut rng);
        let b = VnStack::init(&[3, 5], &mut rng);
        let (_, tape) = a.forward_with_tape(&rand_feat(3, 1, &mut rng)).unwrap();
        assert!(matches!(
            b.backward(tape, &DMatrix::zeros(5, 3)),
            Err(VecNetError::TapeMismatch(_))
        ));
        let topo = MlpTopology {
            input: 2,
            hidden: 3,
            depth: 1,
            output: 1,
            softplus_beta: 1.0,
        };
        let m = ScalarMlp::init(&topo, &mut rng);
        let (_, tape) = m.forward_with_tape(&rand_mat(2, 4, &mut rng)).unwrap();
        assert!(m.backward(tape, &DMatrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn mlp_is_deterministic() {
        let topo = MlpTopology {
            input: 3,
            hidden: 16,
            depth: 3,
            output: 1,
            softplus_beta: 10.0,
        };
        let a = ScalarMlp::init(&topo, &mut rng_from_seed(10));
        let b = ScalarMlp::init(&topo, &mut rng_from_seed(10));
        let x = [0.1, -0.4, 0.9];
        assert_eq!(
            a.forward_one(&x).unwrap()[0].to_bits(),
            b.forward_one(&x).unwrap()[0].to_bits()
        );
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = DMatrix::from_element(2, 2, 0.5);
        let mut st = AdamState::new(&[(2, 2)]);
        adam_step(&mut [&mut p], &[DMatrix::zeros(2, 2)], &mut st, &cfg).unwrap();
        assert_eq!(p, DMatrix::from_element(2, 2, 0.5));
        st.m[0].fill(1.0);
        st.v[0].fill(1.0);
        adam_step(&mut [&mut p], &[DMatrix::zeros(2, 2)], &mut st, &cfg).unwrap();
        assert_eq!(st.m[0][0], cfg.beta1);
        assert_eq!(st.v[0][0], cfg.beta2);
    }

    #[test]
    fn adam_constant_gradient_steps_by_lr() {
        let cfg = AdamConfig::default();
        let mut p = DMatrix::from_element(1, 1, 0.0);
        let mut st = AdamState::new(&[(1, 1)]);
        let g = DMatrix::from_element(1, 1, 3.7);
        let mut prev = 0.0;
        for _ in 0..200 {
            adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, &cfg).unwrap();
            let step = prev - p[0];
            prev = p[0];
            assert!((step - cfg.lr).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let cfg = AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        };
        let mut w = DMatrix::from_row_slice(1, 3, &[0.8, -0.5, 0.3]);
        let mut st = AdamState::new(&[(1, 3)]);
        let mut last = w.norm_squared();
        for _ in 0..100 {
            let g = &w * 2.0;
            adam_step(&mut [&mut w], &[g], &mut st, &cfg).unwrap();
            let now = w.norm_squared();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from_seed(11);
        let mut ck = Checkpoint::new("test", serde_json::json!({"widths": [3, 4]}));
        let mut a = rand_mat(3, 4, &mut rng);
        round_to_f32(&mut a);
        ck.push("a", &a);
        ck.sections.push((*b"LIBRARY\0", vec![1, 2, 3]));
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert!(back.tensor("a", 4, 3).is_err());
        assert!(back.tensor("b", 3, 4).is_err());
        assert!(Checkpoint::read(&buf[..buf.len() - 2]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read(bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn linear_layer_commutes_with_rotation(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let r = random_rotation(&mut rng);
            let f = rand_feat(4, 2, &mut rng);
            let w = rand_mat(3, 4, &mut rng);
            let a = vn_linear(&w, &f.rotate(&r)).unwrap();
            let b = vn_linear(&w, &f).unwrap().rotate(&r);
            prop_assert!((a.0 - b.0).norm() <= 1e-5 * f.norm().max(1e-12));
        }
    }
}
