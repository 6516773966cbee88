//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.
//!
//! Run a subset by number: `cargo test --test acceptance -- 1 7 9`.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::Rng;

use efem::engine::{run as run_engine, EngineConfig, Segmentation};
use efem::evalkit::{evaluate, Prediction};
use efem::geometry::{
    apply_sim3, marching_cubes, rng_from_seed, Aabb, EfemRng, ScenePointCloud, Sim3Transform, Vec3,
};
use efem::prior::{CodeGrad, LatentLibrary, LearnedPrior, PriorModel, PriorTopology, SphereOracle};
use efem::scenegen::{generate, gt_index_sets, write_scene, GroundTruth, SceneSpec, Setup};
use efem::training::{heldout_sdf_error, sample_shape, train, FamilyConfig, TrainConfig};
use efem::vecnet::{
    channel_normalize, channel_normalize_backward, invariant_head, invariant_head_backward, mean_pool,
    mean_pool_backward, vn_linear, vn_linear_backward, vn_relu_backward, vn_relu_with_directions, MlpTopology,
    ScalarMlp, VecFeature, VnStack,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = fn() -> Outcome;

const CRITERIA: [(&str, Criterion, u64); 9] = [
    ("equivariance", equivariance, 30),
    ("gradients", gradients, 60),
    ("oracle end-to-end", oracle_end_to_end, 600),
    ("sim3 covariance", sim3_covariance, 600),
    ("learned prior", learned_prior, 900),
    ("ablation direction", ablation_direction, 600),
    ("evaluator vs brute force", evaluator_brute_force, 60),
    ("determinism", determinism, 300),
    ("marching cubes", marching_cubes_sphere, 30),
];

fn main() {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f, budget)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let out = f();
        let elapsed = t.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        println!(
            "{} [{n}] {name}: {} ({:.1} s of {budget} s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-9)
}

fn small_topology() -> PriorTopology {
    PriorTopology {
        n_points: 48,
        point_widths: vec![5],
        global_widths: vec![6],
        k_rot: 3,
        k_inv_dirs: 2,
        mlp_hidden: 8,
        mlp_depth: 2,
        softplus_beta: 10.0,
        radial_base: true,
    }
}

fn random_shape_points(n: usize, rng: &mut EfemRng) -> Vec<Vec3> {
    let family = FamilyConfig::only(&[
        efem::training::ShapeKind::Sphere,
        efem::training::ShapeKind::Capsule,
        efem::training::ShapeKind::RoundedBox,
    ]);
    let shape = sample_shape(&family, rng).unwrap();
    let s = rng.random_range(0.3..2.0);
    let offset = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    shape.sample_surface(n, rng).unwrap().into_iter().map(|p| s * p + offset).collect()
}

fn predictions(seg: &Segmentation) -> Vec<Prediction> {
    seg.instances
        .iter()
        .map(|i| Prediction {
            points: i.point_indices.clone(),
            confidence: i.confidence,
        })
        .collect()
}

fn oracle_scene(setup: Setup, seed: u64) -> (ScenePointCloud, GroundTruth) {
    generate(&SceneSpec {
        setup,
        seed,
        ..SceneSpec::default()
    })
    .unwrap()
}

const ORACLE_SCENES: u64 = 20;

fn oracle_ap50(setup: Setup, cfg: &EngineConfig) -> f64 {
    let prior = PriorModel::Sphere(SphereOracle);
    let scenes: Vec<_> = (0..ORACLE_SCENES)
        .map(|seed| {
            let (cloud, gt) = oracle_scene(setup, seed);
            let seg = run_engine(&cloud, &prior, None, cfg).unwrap();
            (predictions(&seg), gt_index_sets(&gt))
        })
        .collect();
    evaluate(&scenes).ap50
}

// ---------------------------------------------------------------------------
// 1. encode(g·P) = g∘encode(P) and decode(g·x, g∘Θ) = decode(x, Θ)

fn equivariance() -> Outcome {
    let mut rng = rng_from_seed(101);
    let learned = PriorModel::Learned(Box::new(LearnedPrior::init(PriorTopology::default(), &mut rng).unwrap()));
    let models = [PriorModel::Sphere(SphereOracle), learned];
    let n = PriorTopology::default().n_points;
    let (mut enc_bad, mut enc_total, mut dec_bad, mut dec_total) = (0, 0, 0, 0);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let p = random_shape_points(n, &mut rng);
        let g = Sim3Transform::random(&mut rng, (0.25, 4.0), 3.0);
        let gp: Vec<Vec3> = p.iter().map(|x| g.apply_point(x)).collect();
        let model = &models[trial % 2];
        let code = model.encode(&p).unwrap();
        let expected = code.act(&g).to_flat();
        let got = model.encode(&gp).unwrap().to_flat();
        // The oracle's `theta_r` is a fixed frame; a sphere field does not depend on it.
        let skip = if model.is_analytic() { 3 * code.theta_r.len() } else { 0 };
        for (a, b) in got.iter().zip(&expected).skip(skip) {
            enc_total += 1;
            let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-9);
            worst = worst.max(err);
            enc_bad += usize::from(!rel_close(*a, *b, 1e-4));
        }
        let moved = code.act(&g);
        for _ in 0..20 {
            let x = code.theta_c
                + code.theta_s
                    * Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let a = model.decode(&g.apply_point(&x), &moved).unwrap();
            let b = model.decode(&x, &code).unwrap();
            dec_total += 1;
            dec_bad += usize::from(!rel_close(a, b, 1e-4));
        }
    }
    Outcome::new(
        enc_bad == 0 && dec_bad == 0,
        format!(
            "encode {}/{enc_total} components within 1e-4 (worst {worst:.1e}), decode {}/{dec_total} within 1e-4",
            enc_total - enc_bad,
            dec_total - dec_bad
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Central finite differences against the analytic backward passes

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

#[derive(Default)]
struct GradTally {
    ok: usize,
    total: usize,
}

impl GradTally {
    fn check(&mut self, numeric: f64, analytic: f64) {
        self.total += 1;
        let den = numeric.abs().max(analytic.abs()).max(1e-6);
        self.ok += usize::from((numeric - analytic).abs() / den <= FD_TOL);
    }

    fn probe(&mut self, x: &mut DMatrix<f64>, analytic: &DMatrix<f64>, f: &mut dyn FnMut(&DMatrix<f64>) -> f64) {
        self.probe_step(FD_STEP, x, analytic, f);
    }

    /// Probes every coordinate of `x` for `f` against `analytic` with step `h`.
    fn probe_step(
        &mut self,
        h: f64,
        x: &mut DMatrix<f64>,
        analytic: &DMatrix<f64>,
        f: &mut dyn FnMut(&DMatrix<f64>) -> f64,
    ) {
        assert_eq!(x.shape(), analytic.shape());
        for i in 0..x.len() {
            let v = x[i];
            x[i] = v + h;
            let fp = f(x);
            x[i] = v - h;
            let fm = f(x);
            x[i] = v;
            self.check((fp - fm) / (2.0 * h), analytic[i]);
        }
    }

    fn frac(&self) -> f64 {
        self.ok as f64 / self.total.max(1) as f64
    }
}

fn slot(results: &mut Vec<(&'static str, GradTally)>, name: &'static str) -> usize {
    if let Some(i) = results.iter().position(|(n, _)| *n == name) {
        return i;
    }
    results.push((name, GradTally::default()));
    results.len() - 1
}

fn rand_mat(r: usize, c: usize, rng: &mut EfemRng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn gradients() -> Outcome {
    let mut rng = rng_from_seed(202);
    let mut results: Vec<(&str, GradTally)> = Vec::new();

    for _ in 0..5 {
        // vn_linear
        let i = slot(&mut results, "vn_linear");
        let mut w = rand_mat(4, 5, &mut rng);
        let mut f = rand_mat(5, 3 * 3, &mut rng);
        let c = rand_mat(4, 9, &mut rng);
        let (dw, df) = vn_linear_backward(&w, &VecFeature(f.clone()), &c);
        let fc = f.clone();
        results[i].1.probe(&mut w, &dw, &mut |w| dot(&vn_linear(w, &VecFeature(fc.clone())).unwrap().0, &c));
        let wc = w.clone();
        results[i].1.probe(&mut f, &df, &mut |f| dot(&vn_linear(&wc, &VecFeature(f.clone())).unwrap().0, &c));

        // vn_relu_with_directions
        let i = slot(&mut results, "vn_relu");
        let mut f = rand_mat(4, 3 * 3, &mut rng);
        let mut d = rand_mat(4, 3 * 3, &mut rng);
        let c = rand_mat(4, 9, &mut rng);
        let (df, dd) = vn_relu_backward(&VecFeature(f.clone()), &VecFeature(d.clone()), &c);
        let dc = d.clone();
        results[i].1.probe(&mut f, &df, &mut |f| {
            dot(&vn_relu_with_directions(&VecFeature(f.clone()), &VecFeature(dc.clone())).0, &c)
        });
        let fc = f.clone();
        results[i].1.probe(&mut d, &dd, &mut |d| {
            dot(&vn_relu_with_directions(&VecFeature(fc.clone()), &VecFeature(d.clone())).0, &c)
        });

        // channel_normalize
        let i = slot(&mut results, "channel_normalize");
        let mut f = rand_mat(5, 3 * 2, &mut rng);
        let c = rand_mat(5, 6, &mut rng);
        let cs = rng.random_range(-1.0..1.0);
        let (_, scale) = channel_normalize(&VecFeature(f.clone())).unwrap();
        let df = channel_normalize_backward(&VecFeature(f.clone()), scale, &c, cs);
        results[i].1.probe(&mut f, &df, &mut |f| {
            let (h, s) = channel_normalize(&VecFeature(f.clone())).unwrap();
            dot(&h.0, &c) + cs * s
        });

        // invariant_head
        let i = slot(&mut results, "invariant_head");
        let mut a = rand_mat(3, 3 * 2, &mut rng);
        let mut b = rand_mat(4, 3 * 2, &mut rng);
        let n_out = invariant_head(&VecFeature(a.clone()), &VecFeature(b.clone())).unwrap().len();
        let c: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (da, db) = invariant_head_backward(&VecFeature(a.clone()), &VecFeature(b.clone()), &c);
        let lin = |a: &DMatrix<f64>, b: &DMatrix<f64>| -> f64 {
            let out = invariant_head(&VecFeature(a.clone()), &VecFeature(b.clone())).unwrap();
            out.iter().zip(&c).map(|(o, c)| o * c).sum()
        };
        let bc = b.clone();
        results[i].1.probe(&mut a, &da, &mut |a| lin(a, &bc));
        let ac = a.clone();
        results[i].1.probe(&mut b, &db, &mut |b| lin(&ac, b));

        // mean_pool
        let i = slot(&mut results, "mean_pool");
        let mut f = rand_mat(3, 3 * 5, &mut rng);
        let c = rand_mat(3, 3, &mut rng);
        let df = mean_pool_backward(&c, 5);
        results[i].1.probe(&mut f, &df, &mut |f| dot(&mean_pool(&VecFeature(f.clone())).0, &c));

        // VnStack
        let i = slot(&mut results, "vn_stack");
        let stack = VnStack::init(&[3, 5, 4], &mut rng);
        let mut x = rand_mat(3, 3 * 4, &mut rng);
        let c = rand_mat(4, 12, &mut rng);
        let (_, tape) = stack.forward_with_tape(&VecFeature(x.clone())).unwrap();
        let (pg, dx) = stack.backward(tape, &c).unwrap();
        let st = stack.clone();
        results[i].1.probe(&mut x, &dx, &mut |x| dot(&st.forward(&VecFeature(x.clone())).unwrap().0, &c));
        for (bi, g) in pg.iter().enumerate() {
            let mut s = stack.clone();
            let mut w = s.blocks[bi].linear.clone();
            results[i].1.probe(&mut w, &g.linear, &mut |w| {
                s.blocks[bi].linear = w.clone();
                dot(&s.forward(&VecFeature(x.clone())).unwrap().0, &c)
            });
            let mut s = stack.clone();
            let mut w = s.blocks[bi].direction.clone();
            results[i].1.probe(&mut w, &g.direction, &mut |w| {
                s.blocks[bi].direction = w.clone();
                dot(&s.forward(&VecFeature(x.clone())).unwrap().0, &c)
            });
        }

        // ScalarMlp
        let i = slot(&mut results, "scalar_mlp");
        let topo = MlpTopology {
            input: 4,
            hidden: 6,
            depth: 2,
            output: 2,
            softplus_beta: 10.0,
        };
        let mlp = ScalarMlp::init(&topo, &mut rng);
        let mut x = rand_mat(4, 3, &mut rng);
        let c = rand_mat(2, 3, &mut rng);
        let (_, tape) = mlp.forward_with_tape(&x).unwrap();
        let (mg, dx) = mlp.backward(tape, &c).unwrap();
        let (_, tape) = mlp.forward_with_tape(&x).unwrap();
        let dx_only = mlp.input_gradient(tape, &c).unwrap();
        let m = mlp.clone();
        results[i].1.probe(&mut x, &dx, &mut |x| dot(&m.forward(x).unwrap(), &c));
        results[i].1.probe(&mut x, &dx_only, &mut |x| dot(&m.forward(x).unwrap(), &c));
        for l in 0..mlp.weights.len() {
            let mut m = mlp.clone();
            let mut w = m.weights[l].clone();
            results[i].1.probe(&mut w, &mg.weights[l], &mut |w| {
                m.weights[l] = w.clone();
                dot(&m.forward(&x).unwrap(), &c)
            });
            let mut m = mlp.clone();
            let mut b = m.biases[l].clone();
            results[i].1.probe(&mut b, &mg.biases[l], &mut |b| {
                m.biases[l] = b.clone();
                dot(&m.forward(&x).unwrap(), &c)
            });
        }
    }

    // Whole prior: a linear functional of the metric predictions, back through
    // decoder and encoder into every parameter.
    let i = slot(&mut results, "prior_network");
    for _ in 0..2 {
        let model = LearnedPrior::init(small_topology(), &mut rng).unwrap();
        let pts = random_shape_points(small_topology().n_points, &mut rng);
        let queries: Vec<Vec3> = (0..12)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let c: Vec<f64> = queries.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |m: &LearnedPrior| -> f64 {
            let code = m.encode(&pts).unwrap();
            let (pred, _) = m.decode_with_tape(&queries, &code).unwrap();
            pred.iter().zip(&c).map(|(p, c)| p * c).sum()
        };
        let mut grads = model.zero_grads();
        let (code, etape) = model.encode_with_tape(&pts).unwrap();
        let (_, dtape) = model.decode_with_tape(&queries, &code).unwrap();
        let dcode = model.decoder_backward(dtape, &c, &mut grads).unwrap();
        let mut total = CodeGrad::zeros(code.theta_r.len(), code.theta_inv.len());
        total.add_assign(&dcode);
        model.encoder_backward(etape, &total, &mut grads).unwrap();
        let analytic = grads.into_list();
        let n_params = analytic.len();
        for p in 0..n_params {
            let mut m = model.clone();
            let mut w = m.params_mut()[p].clone();
            results[i].1.probe(&mut w, &analytic[p], &mut |w| {
                *m.params_mut()[p] = w.clone();
                objective(&m)
            });
        }
    }

    // decode_gradient for both backends.
    let i = slot(&mut results, "decode_gradient");
    let learned = PriorModel::Learned(Box::new(LearnedPrior::init(small_topology(), &mut rng).unwrap()));
    for model in [PriorModel::Sphere(SphereOracle), learned] {
        for _ in 0..30 {
            let pts = random_shape_points(small_topology().n_points, &mut rng);
            let code = model.encode(&pts).unwrap();
            let mut x = DMatrix::from_fn(3, 1, |r, _| {
                code.theta_c[r] + code.theta_s * rng.random_range(-1.5..1.5)
            });
            let Ok(g) = model.decode_gradient(&Vec3::new(x[0], x[1], x[2]), &code) else {
                continue;
            };
            let g = DMatrix::from_column_slice(3, 1, g.as_slice());
            results[i].1.probe_step(FD_STEP * code.theta_s, &mut x, &g, &mut |x| model.decode_metric(&Vec3::new(x[0], x[1], x[2]), &code).unwrap());
        }
    }

    let (worst_name, worst) = results
        .iter()
        .map(|(n, t)| (*n, t.frac()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let probed: usize = results.iter().map(|(_, t)| t.total).sum();
    Outcome::new(
        results.iter().all(|(_, t)| t.frac() >= 0.95),
        format!(
            "{} operations, {probed} coordinates; lowest agreement {:.1}% ({worst_name})",
            results.len(),
            100.0 * worst
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Sphere oracle on Z, SO3 and Pile scenes

fn oracle_end_to_end() -> Outcome {
    let cfg = EngineConfig::default();
    let z = oracle_ap50(Setup::Z, &cfg);
    let so3 = oracle_ap50(Setup::SO3, &cfg);
    let pile = oracle_ap50(Setup::Pile, &cfg);
    Outcome::new(
        z >= 0.9 && so3 >= 0.9 && pile >= 0.75,
        format!("AP50 Z {z:.3} (>= 0.90), SO3 {so3:.3} (>= 0.90), Pile {pile:.3} (>= 0.75)"),
    )
}

// ---------------------------------------------------------------------------
// 4. Same index sets after a global similarity with scaled lengths

fn sim3_covariance() -> Outcome {
    let prior = PriorModel::Sphere(SphereOracle);
    let cfg = EngineConfig::default();
    let mut rng = rng_from_seed(404);
    let mut counts = Vec::new();
    for setup in [Setup::Z, Setup::SO3, Setup::Pile] {
        let mut same = 0;
        for seed in 0..ORACLE_SCENES {
            let (cloud, _) = oracle_scene(setup, seed);
            let g = Sim3Transform::random(&mut rng, (0.25, 4.0), 5.0);
            let a = run_engine(&cloud, &prior, None, &cfg).unwrap();
            let b = run_engine(&apply_sim3(&g, &cloud), &prior, None, &cfg.scaled(g.scale)).unwrap();
            let sets = |s: &Segmentation| -> BTreeSet<Vec<usize>> {
                s.instances.iter().map(|i| i.point_indices.clone()).collect()
            };
            same += usize::from(sets(&a) == sets(&b));
        }
        counts.push((setup, same));
    }
    Outcome::new(
        counts.iter().all(|(_, n)| *n >= 18),
        counts
            .iter()
            .map(|(s, n)| format!("{s:?} {n}/{ORACLE_SCENES}"))
            .collect::<Vec<_>>()
            .join(", ")
            + " identical (>= 18)",
    )
}

// ---------------------------------------------------------------------------
// 5. Train on spheres and capsules, then segment with the trained prior

fn learned_prior() -> Outcome {
    let tcfg = TrainConfig::default();
    let out = train(&tcfg, |_| {}).unwrap();
    let heldout = heldout_sdf_error(&out.model, &tcfg, 32).unwrap();
    let prior = PriorModel::Learned(Box::new(out.model));
    let library: &LatentLibrary = &out.library;
    let cfg = EngineConfig::default();
    let scenes: Vec<_> = (0..10)
        .map(|seed| {
            let (cloud, gt) = generate(&SceneSpec {
                setup: Setup::Z,
                family: tcfg.family.clone(),
                seed,
                ..SceneSpec::default()
            })
            .unwrap();
            let seg = run_engine(&cloud, &prior, Some(library), &cfg).unwrap();
            (predictions(&seg), gt_index_sets(&gt))
        })
        .collect();
    let ap50 = evaluate(&scenes).ap50;
    Outcome::new(
        heldout < 0.05 && ap50 >= 0.6,
        format!("held-out |SDF error| {heldout:.4} (< 0.05), AP50 on 10 Z scenes {ap50:.3} (>= 0.6)"),
    )
}

// ---------------------------------------------------------------------------
// 6. Removing phase 2 or normals does not help on piles

fn ablation_direction() -> Outcome {
    let full = EngineConfig::default();
    let full_ap = oracle_ap50(Setup::Pile, &full);
    let no_phase2 = oracle_ap50(
        Setup::Pile,
        &EngineConfig {
            use_phase2: false,
            ..full.clone()
        },
    );
    let no_normals = oracle_ap50(
        Setup::Pile,
        &EngineConfig {
            use_normals: false,
            ..full
        },
    );
    Outcome::new(
        full_ap >= no_phase2 && full_ap >= no_normals,
        format!("Pile AP50 full {full_ap:.3}, no-phase2 {no_phase2:.3}, no-normals {no_normals:.3}"),
    )
}

// ---------------------------------------------------------------------------
// 7. Evaluator against an exhaustive matcher

/// The matching that is lexicographically best over predictions in
/// confidence order (descending, ties by input index), where each prediction
/// prefers being matched, then higher IoU, then the lower ground-truth index.
/// Found by enumerating every injective partial assignment.
fn brute_force_matches(preds: &[Prediction], gts: &[Vec<usize>], thr: f64) -> Vec<bool> {
    let iou = |a: &[usize], b: &[usize]| -> f64 {
        let a: HashSet<usize> = a.iter().copied().collect();
        let b: HashSet<usize> = b.iter().copied().collect();
        let union = a.union(&b).count();
        if union == 0 {
            0.0
        } else {
            a.intersection(&b).count() as f64 / union as f64
        }
    };
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.partial_cmp(&preds[a].confidence).unwrap().then(a.cmp(&b)));

    type Key = Vec<(bool, f64, i64)>;
    let mut best: Option<(Key, Vec<bool>)> = None;
    let mut assign: Vec<Option<usize>> = vec![None; order.len()];
    fn rec(
        k: usize,
        order: &[usize],
        assign: &mut Vec<Option<usize>>,
        used: &mut Vec<bool>,
        visit: &mut dyn FnMut(&[Option<usize>]),
    ) {
        if k == order.len() {
            visit(assign);
            return;
        }
        assign[k] = None;
        rec(k + 1, order, assign, used, visit);
        for g in 0..used.len() {
            if !used[g] {
                used[g] = true;
                assign[k] = Some(g);
                rec(k + 1, order, assign, used, visit);
                assign[k] = None;
                used[g] = false;
            }
        }
    }
    let mut used = vec![false; gts.len()];
    rec(0, &order, &mut assign, &mut used, &mut |a| {
        let mut key = Vec::with_capacity(a.len());
        for (k, g) in a.iter().enumerate() {
            match g {
                Some(g) => {
                    let v = iou(&preds[order[k]].points, &gts[*g]);
                    if v < thr {
                        return;
                    }
                    key.push((true, v, -(*g as i64)));
                }
                None => key.push((false, 0.0, 0)),
            }
        }
        let better = match &best {
            None => true,
            Some((b, _)) => key.partial_cmp(b) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((key, a.iter().map(Option::is_some).collect()));
        }
    });
    best.unwrap().1
}

/// Area under the precision envelope, one recall step of `1/n_gt` per true positive.
fn brute_force_ap(matched: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    let precision: Vec<f64> = (0..matched.len())
        .map(|k| matched[..=k].iter().filter(|m| **m).count() as f64 / (k + 1) as f64)
        .collect();
    let mut sum = 0.0;
    for k in 0..matched.len() {
        if matched[k] {
            sum += precision[k..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    sum / n_gt as f64
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

fn evaluator_brute_force() -> Outcome {
    let mut rng = rng_from_seed(707);
    let mut bad = 0;
    let cases = 100;
    for _ in 0..cases {
        let subset = |rng: &mut EfemRng| -> Vec<usize> { (0..8).filter(|_| rng.random_bool(0.4)).collect() };
        let n_pred = rng.random_range(0..=4);
        let n_gt = rng.random_range(0..=3);
        let preds: Vec<Prediction> = (0..n_pred)
            .map(|_| Prediction {
                points: subset(&mut rng),
                confidence: [0.2, 0.5, 0.5, 0.9][rng.random_range(0..4)],
            })
            .collect();
        let gts: Vec<Vec<usize>> = (0..n_gt).map(|_| subset(&mut rng)).collect();
        let report = evaluate(&[(preds.clone(), gts.clone())]);
        let mut coco_sum = 0.0;
        let mut ok = true;
        for r in &report.per_threshold {
            let expected = brute_force_ap(&brute_force_matches(&preds, &gts, r.threshold), gts.len());
            ok &= same(r.ap, expected);
            if r.threshold >= 0.5 - 1e-9 {
                coco_sum += expected;
            }
        }
        ok &= same(report.ap, coco_sum / 10.0);
        ok &= same(report.ap50, brute_force_ap(&brute_force_matches(&preds, &gts, 0.5), gts.len()));
        ok &= same(report.ap25, brute_force_ap(&brute_force_matches(&preds, &gts, 0.25), gts.len()));
        bad += usize::from(!ok);
    }
    Outcome::new(bad == 0, format!("{}/{cases} cases identical at every threshold", cases - bad))
}

// ---------------------------------------------------------------------------
// 8. Byte-identical reports across runs and worker counts

fn segment_report(scene: &Path, out: &Path, workers: usize) -> Vec<u8> {
    let status = Command::new(env!("CARGO_BIN_EXE_efem"))
        .args(["--seed", "5", "--workers", &workers.to_string(), "--out"])
        .arg(out)
        .arg("segment")
        .arg(scene)
        .env("EFEM_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "segment exited with {status}");
    let id = scene.file_stem().unwrap().to_string_lossy();
    let mut bytes = std::fs::read(out.join(format!("{id}.report.json"))).unwrap();
    let mut meshes: Vec<_> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "obj"))
        .collect();
    meshes.sort();
    for m in meshes {
        bytes.extend(std::fs::read(m).unwrap());
    }
    bytes
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (cloud, gt) = oracle_scene(Setup::Pile, 3);
    write_scene(dir.path(), "pile", &cloud, &gt).unwrap();
    let scene = dir.path().join("pile.ply");
    let runs: Vec<(&str, Vec<u8>)> = [("workers 1", 1), ("workers 1 again", 1), ("workers 4", 4)]
        .iter()
        .enumerate()
        .map(|(i, (name, w))| (*name, segment_report(&scene, &dir.path().join(format!("run{i}")), *w)))
        .collect();
    let differing: Vec<&str> = runs[1..].iter().filter(|(_, b)| *b != runs[0].1).map(|(n, _)| *n).collect();
    Outcome::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("3 runs, reports and meshes identical ({} bytes)", runs[0].1.len())
        } else {
            format!("differs from the first run: {differing:?}")
        },
    )
}

// ---------------------------------------------------------------------------
// 9. Unit sphere through marching cubes

fn marching_cubes_sphere() -> Outcome {
    let res = 32;
    let domain = Aabb::cube(Vec3::zeros(), 1.25);
    let cell = 2.5 / (res - 1) as f64;
    let mesh = marching_cubes(|x: &Vec3| x.norm() - 1.0, &domain, [res; 3]).unwrap();
    let max_dev = mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max);
    let max_angle = mesh
        .vertices
        .iter()
        .zip(&mesh.vertex_normals)
        .map(|(v, n)| (v.normalize().dot(&n.normalize())).clamp(-1.0, 1.0).acos().to_degrees())
        .fold(0.0, f64::max);
    Outcome::new(
        !mesh.is_empty() && mesh.validate() && max_dev < 2.0 * cell && max_angle < 5.0,
        format!(
            "{} vertices, max radial deviation {:.3} cells (< 2), max normal angle {max_angle:.2} deg (< 5)",
            mesh.vertices.len(),
            max_dev / cell
        ),
    )
}
