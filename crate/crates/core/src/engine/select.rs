//! Scoring, mesh extraction, pose recovery and proposal selection.

use nalgebra::SVD;

use super::steps::{normal_angle, PointError};
use super::{ConfidencePenalty, EngineConfig, EngineError};
use crate::geometry::{marching_cubes_batched, Aabb, Mat3, ScenePointCloud, Sim3Transform, SpatialHash, TriangleMesh, Vec3};
use crate::prior::{LatentCode, LatentLibrary, PriorModel};

/// Confidence terms of one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    /// Fraction of encoder inputs within both fitting thresholds.
    pub s1: f64,
    /// Fraction of mesh vertices supported by a nearby, consistently oriented scene point.
    pub s2: f64,
    pub confidence: f64,
}

/// Fraction of `inputs` (indices into `errors`, with multiplicity) fitted within thresholds.
pub fn inlier_fraction(errors: &[PointError], inputs: &[usize], cfg: &EngineConfig) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let ok = inputs
        .iter()
        .filter(|&&i| errors[i].e_d < cfg.delta_d && errors[i].e_n < cfg.delta_n)
        .count();
    ok as f64 / inputs.len() as f64
}

/// Fraction of mesh vertices whose nearest scene point is within `delta_d` and `delta_n`.
pub fn mesh_support(mesh: &TriangleMesh, scene: &ScenePointCloud, index: &SpatialHash, cfg: &EngineConfig) -> f64 {
    if mesh.vertices.is_empty() {
        return 0.0;
    }
    let ok = mesh
        .vertices
        .iter()
        .zip(&mesh.vertex_normals)
        .filter(|(v, n)| {
            let (j, d) = index.nearest(v);
            d < cfg.delta_d && (!cfg.use_normals || normal_angle(&scene.normals()[j], n, cfg.strict_normal_sign) < cfg.delta_n)
        })
        .count();
    ok as f64 / mesh.vertices.len() as f64
}

pub fn confidence(s1: f64, s2: f64, cfg: &EngineConfig) -> f64 {
    match cfg.confidence_penalty {
        ConfidencePenalty::Min => s1 * (s2 / cfg.delta_c).min(1.0),
        ConfidencePenalty::AsPrinted => s1 * (s2 / cfg.delta_c).max(1.0),
    }
}

pub fn score_proposal(
    errors: &[PointError],
    inputs: &[usize],
    mesh: &TriangleMesh,
    scene: &ScenePointCloud,
    index: &SpatialHash,
    cfg: &EngineConfig,
) -> Score {
    let s1 = inlier_fraction(errors, inputs, cfg);
    let s2 = mesh_support(mesh, scene, index, cfg);
    Score {
        s1,
        s2,
        confidence: confidence(s1, s2, cfg),
    }
}

/// Zero level set of `theta_s·Ψ` inside the cube of half-width `1.5·theta_s` around `theta_c`.
pub fn extract_proposal_mesh(prior: &PriorModel, code: &LatentCode, resolution: usize) -> Result<TriangleMesh, EngineError> {
    let domain = Aabb::cube(code.theta_c, 1.5 * code.theta_s);
    let mut failure = None;
    let mesh = marching_cubes_batched(
        |pts: &[Vec3]| match prior.evaluate(pts, code, false) {
            Ok(s) => s.iter().map(|f| code.theta_s * f.psi).collect(),
            Err(e) => {
                failure.get_or_insert(e);
                vec![0.0; pts.len()]
            }
        },
        &domain,
        [resolution; 3],
    )?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(mesh),
    }
}

/// Similarity taking the nearest library shape onto the observed code.
///
/// Rotation solves `min_R ‖Θ_R^obs − Θ_R^ref·R‖_F` over SO(3); scale is the ratio
/// of `theta_s`, and translation maps the reference center onto the observed one.
pub fn estimate_pose(code: &LatentCode, library: &LatentLibrary) -> Result<Sim3Transform, EngineError> {
    let (idx, _) = library.nearest(code)?.ok_or(EngineError::NoPose("empty library"))?;
    let reference = &library.entries[idx].code;
    if reference.theta_r.len() != code.theta_r.len() {
        return Err(EngineError::NoPose("library code has a different channel count"));
    }
    let mut m = Mat3::zeros();
    for (b, a) in reference.theta_r.iter().zip(&code.theta_r) {
        m += b * a.transpose();
    }
    let svd = SVD::new(m, true, true);
    let mut sv = svd.singular_values;
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-9 * sv[0].max(f64::MIN_POSITIVE)) {
        return Err(EngineError::NoPose("rotation channels have rank < 2"));
    }
    let d = (u * v_t).determinant().signum();
    let rotation = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    let scale = code.theta_s / reference.theta_s;
    let translation = code.theta_c - scale * rotation.tr_mul(&reference.theta_c);
    Sim3Transform::new(scale, rotation, translation).map_err(|e| EngineError::Numeric(e.to_string()))
}

fn ranked(s1: &[f64], alive: &[usize]) -> Vec<usize> {
    let mut order = alive.to_vec();
    order.sort_by(|&a, &b| s1[b].total_cmp(&s1[a]).then(a.cmp(&b)));
    order
}

pub fn binarize(w: &[f64]) -> Vec<bool> {
    w.iter().map(|&v| v >= 0.5).collect()
}

fn overlap(a: &[bool], b: &[bool]) -> (usize, usize) {
    let mut inter = 0;
    let mut union = 0;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    (inter, union)
}

/// Indices (into `masks`) that survive mask-IoU deduplication, in ascending order.
///
/// Pairs with IoU strictly above `threshold` keep the higher `s1`; ties keep the lower index.
pub fn dedupe(masks: &[Vec<bool>], s1: &[f64], threshold: f64) -> Vec<usize> {
    let all: Vec<usize> = (0..masks.len()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for k in ranked(s1, &all) {
        let clash = kept.iter().any(|&j| {
            let (i, u) = overlap(&masks[k], &masks[j]);
            u > 0 && i as f64 / u as f64 > threshold
        });
        if !clash {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    kept
}

/// Indices that are not mostly contained in a kept proposal with at least the same `s1`.
///
/// Empty masks count as contained.
pub fn filter_containment(masks: &[Vec<bool>], s1: &[f64], frac: f64) -> Vec<usize> {
    let all: Vec<usize> = (0..masks.len()).collect();
    let mut kept: Vec<usize> = Vec::new();
    for k in ranked(s1, &all) {
        let size = masks[k].iter().filter(|&&b| b).count();
        let contained = size == 0
            || kept.iter().any(|&j| {
                let (i, _) = overlap(&masks[k], &masks[j]);
                i as f64 / size as f64 > frac
            });
        if !contained {
            kept.push(k);
        }
    }
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, rng_from_seed};
    use rand::Rng;
    use crate::prior::{LibraryEntry, SphereOracle};
    use proptest::prelude::*;

    fn mask(bits: &str) -> Vec<bool> {
        bits.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn confidence_penalty_example() {
        let cfg = EngineConfig {
            delta_c: 0.5,
            ..EngineConfig::default()
        };
        assert!((confidence(0.8, 0.2, &cfg) - 0.32).abs() < 1e-15);
        assert_eq!(confidence(0.8, 0.9, &cfg), 0.8);
        let printed = EngineConfig {
            confidence_penalty: ConfidencePenalty::AsPrinted,
            ..cfg
        };
        assert_eq!(confidence(0.8, 0.2, &printed), 0.8);
    }

    #[test]
    fn dedupe_keeps_the_stronger_proposal() {
        let m = vec![mask("11110000"), mask("11100000"), mask("00001111")];
        assert_eq!(dedupe(&m, &[0.5, 0.9, 0.1], 0.3), vec![1, 2]);
        assert_eq!(dedupe(&m, &[0.5, 0.5, 0.1], 0.3), vec![0, 2]);
        // IoU exactly at the threshold is not a duplicate.
        let h = vec![mask("1100"), mask("0110")];
        assert_eq!(dedupe(&h, &[1.0, 1.0], 1.0 / 3.0), vec![0, 1]);
        assert_eq!(dedupe(&[], &[], 0.3), Vec::<usize>::new());
    }

    #[test]
    fn containment_drops_nested_masks() {
        let m = vec![mask("11111111"), mask("00000111"), mask("00000000")];
        assert_eq!(filter_containment(&m, &[0.9, 0.4, 1.0], 0.8), vec![0]);
        // A stronger nested proposal survives.
        assert_eq!(filter_containment(&m, &[0.4, 0.9, 0.0], 0.8), vec![0, 1]);
    }

    #[test]
    fn pose_recovers_a_known_transform() {
        let mut rng = rng_from_seed(11);
        let reference = LatentCode {
            theta_r: (0..8).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect(),
            theta_inv: vec![0.1, 0.2],
            theta_c: Vec3::new(0.01, 0.0, -0.02),
            theta_s: 0.9,
        };
        let decoy = LatentCode {
            theta_inv: vec![5.0, 5.0],
            ..reference.clone()
        };
        let library = LatentLibrary {
            entries: vec![
                LibraryEntry { code: decoy, shape: serde_json::Value::Null },
                LibraryEntry { code: reference.clone(), shape: serde_json::Value::Null },
            ],
        };
        for _ in 0..20 {
            let g = Sim3Transform::random(&mut rng, (0.1, 3.0), 2.0);
            let pose = estimate_pose(&reference.act(&g), &library).unwrap();
            assert!((pose.scale - g.scale).abs() < 1e-9);
            assert!((pose.rotation - g.rotation).norm() < 1e-9);
            assert!((pose.translation - g.translation).norm() < 1e-9);
        }
        let rank1 = LatentCode {
            theta_r: vec![Vec3::x(), 2.0 * Vec3::x()],
            ..reference.clone()
        };
        let lib1 = LatentLibrary {
            entries: vec![LibraryEntry { code: rank1.clone(), shape: serde_json::Value::Null }],
        };
        let rotated = rank1.act(&Sim3Transform::new(1.0, random_rotation(&mut rng), Vec3::zeros()).unwrap());
        assert!(matches!(estimate_pose(&rotated, &lib1), Err(EngineError::NoPose(_))));
        assert!(matches!(estimate_pose(&reference, &LatentLibrary::default()), Err(EngineError::NoPose(_))));
    }

    #[test]
    fn sphere_mesh_is_supported_by_its_samples() {
        let prior = PriorModel::Sphere(SphereOracle);
        let code = LatentCode {
            theta_r: vec![Vec3::x(), Vec3::y(), Vec3::z()],
            theta_inv: vec![],
            theta_c: Vec3::new(0.2, 0.0, 0.1),
            theta_s: 0.2,
        };
        let mesh = extract_proposal_mesh(&prior, &code, 32).unwrap();
        assert!(mesh.validate() && !mesh.is_empty());
        for v in &mesh.vertices {
            assert!(((v - code.theta_c).norm() - 0.2).abs() < 0.2 * 3.0 / 31.0);
        }
        // Dense samples of the same sphere support almost every vertex.
        let n = 4000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let (p, nn): (Vec<Vec3>, Vec<Vec3>) = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rho = (1.0 - z * z).sqrt();
                let d = Vec3::new(rho * (golden * i as f64).cos(), rho * (golden * i as f64).sin(), z);
                (code.theta_c + 0.2 * d, d)
            })
            .unzip();
        let scene = ScenePointCloud::new(p, nn).unwrap();
        let index = SpatialHash::build(scene.positions()).unwrap();
        let cfg = EngineConfig::default();
        assert!(mesh_support(&mesh, &scene, &index, &cfg) > 0.95);
        assert_eq!(mesh_support(&TriangleMesh::default(), &scene, &index, &cfg), 0.0);
    }

    fn masks_strategy() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<f64>)> {
        (1usize..7).prop_flat_map(|k| {
            (
                proptest::collection::vec(proptest::collection::vec(any::<bool>(), 12), k),
                proptest::collection::vec(0.0f64..1.0, k),
            )
        })
    }

    proptest! {
        #[test]
        fn dedupe_is_idempotent_and_pairwise_clean((m, s) in masks_strategy()) {
            let kept = dedupe(&m, &s, 0.3);
            prop_assert!(!kept.is_empty());
            let sub_m: Vec<Vec<bool>> = kept.iter().map(|&i| m[i].clone()).collect();
            let sub_s: Vec<f64> = kept.iter().map(|&i| s[i]).collect();
            prop_assert_eq!(dedupe(&sub_m, &sub_s, 0.3).len(), kept.len());
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    let (x, u) = overlap(&m[i], &m[j]);
                    prop_assert!(u == 0 || x as f64 / u as f64 <= 0.3);
                }
            }
        }
    }
}
