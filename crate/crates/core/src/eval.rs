//! Finger-pose noise, joint error, predicted contact maps and ranking metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{contact_probability, ContactParams};
use crate::geometry::{DistanceMode, GeometryError, MeshDistance, Vec3};
use crate::kinematics::{HandDoF, FINGER_DOF};
use crate::scene::{SceneTrajectory, TruthLabel};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("undefined AUC: truth has {positives} positives and {negatives} negatives")]
    UndefinedAuc { positives: usize, negatives: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite prediction at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const NOISE_MEAN: f64 = 1.0;
pub const NOISE_STD: f64 = 0.1;

/// Multiplies finger coefficients by draws from N(1, 0.1). With `shared`
/// one set of 15 draws is applied to every frame.
pub fn inject_finger_noise(hand: &[HandDoF], seed: u64, shared: bool) -> Vec<HandDoF> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid normal");
    let mut draw = || -> [f64; FINGER_DOF] { std::array::from_fn(|_| normal.sample(&mut rng)) };
    let common = shared.then(&mut draw);
    hand.iter()
        .map(|dof| {
            let factors = common.unwrap_or_else(&mut draw);
            let mut out = *dof;
            for (c, f) in out.pose.iter_mut().zip(factors) {
                *c *= f;
            }
            out
        })
        .collect()
}

/// Mean joint position error in millimeters over all joints and frames.
pub fn mpjpe(predicted: &[Vec<Vec3>], truth: &[Vec<Vec3>]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(EvalError::Shape(format!(
            "{} predicted frames, {} true frames",
            predicted.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (t, (p, q)) in predicted.iter().zip(truth).enumerate() {
        if p.len() != q.len() || p.is_empty() {
            return Err(EvalError::Shape(format!("frame {t}: {} vs {} joints", p.len(), q.len())));
        }
        total += p.iter().zip(q).map(|(a, b)| (a - b).norm()).sum::<f64>();
        count += p.len();
    }
    Ok(1000.0 * total / count as f64)
}

/// Per-object-vertex predicted contact probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactMap {
    pub probabilities: Vec<f64>,
}

/// Signed distance of every object vertex to the posed hand surface at frame `t`.
pub fn object_hand_distances(scene: &SceneTrajectory, t: usize) -> Result<Vec<f64>, EvalError> {
    let hand = scene.hand_model.forward(&scene.hand[t]);
    let triangles = scene.hand_model.rest_mesh().triangles();
    let surface = MeshDistance::from_parts(&hand.vertices, triangles, &[], DistanceMode::Surface)?;
    let object = scene.posed_object(t);
    Ok(object.vertices().iter().map(|v| surface.query(v).distance).collect())
}

/// Frame-averaged contact probability of every object vertex.
pub fn contact_map_from_pose(scene: &SceneTrajectory, params: &ContactParams) -> Result<ContactMap, EvalError> {
    let frames = scene.frames();
    let per_frame: Vec<Vec<f64>> = (0..frames)
        .into_par_iter()
        .map(|t| {
            object_hand_distances(scene, t).map(|d| d.iter().map(|&d| contact_probability(d, params)).collect())
        })
        .collect::<Result<_, _>>()?;
    let n = scene.object_mesh.vertex_count();
    let probabilities = (0..n)
        .map(|i| per_frame.iter().map(|f| f[i]).sum::<f64>() / frames as f64)
        .collect();
    Ok(ContactMap { probabilities })
}

fn check_inputs(predicted: &[f64], truth: &[bool]) -> Result<(usize, usize), EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions, {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if let Some(i) = predicted.iter().position(|p| !p.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    let positives = truth.iter().filter(|&&b| b).count();
    let negatives = truth.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::UndefinedAuc { positives, negatives });
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn roc_auc(predicted: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    let (positives, negatives) = check_inputs(predicted, truth)?;
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[a].total_cmp(&predicted[b]));
    // Twice the rank sum of the positives, keeping tie ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && predicted[order[j + 1]] == predicted[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged: (i + j + 2) / 2 each.
        let tied_positives = order[i..=j].iter().filter(|&&k| truth[k]).count() as u128;
        twice_rank_sum += tied_positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * negatives as u128) as f64)
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall it adds.
pub fn pr_auc(predicted: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    let (positives, _) = check_inputs(predicted, truth)?;
    let mut order: Vec<usize> = (0..predicted.len()).collect();
    order.sort_by(|&a, &b| predicted[b].total_cmp(&predicted[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut new_tp = 0;
        let mut j = i;
        while j < order.len() && predicted[order[j]] == predicted[order[i]] {
            if truth[order[j]] {
                new_tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        tp += new_tp;
        if new_tp > 0 {
            area += (new_tp as f64 / positives as f64) * (tp as f64 / (tp + fp) as f64);
        }
        i = j;
    }
    Ok(area)
}

/// Predictions and labels restricted to labelled vertices.
pub fn labelled(predicted: &[f64], truth: &[TruthLabel]) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions, {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    Ok(predicted
        .iter()
        .zip(truth)
        .filter_map(|(&p, t)| t.map(|b| (p, b)))
        .unzip())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub pr_auc: f64,
    pub roc_auc: f64,
}

/// Joint error against `truth` and contact ranking against `labels`.
pub fn evaluate_scene(
    predicted: &SceneTrajectory,
    truth: &SceneTrajectory,
    labels: &[TruthLabel],
    params: &ContactParams,
) -> Result<MetricsReport, EvalError> {
    let mpjpe_mm = mpjpe(&predicted.all_hand_joints(), &truth.all_hand_joints())?;
    let map = contact_map_from_pose(predicted, params)?;
    let (p, t) = labelled(&map.probabilities, labels)?;
    Ok(MetricsReport {
        mpjpe_mm,
        pr_auc: pr_auc(&p, &t)?,
        roc_auc: roc_auc(&p, &t)?,
    })
}

/// Pairwise count of correctly ordered (positive, negative) pairs, ties half.
pub fn brute_force_roc_auc(predicted: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    let (positives, negatives) = check_inputs(predicted, truth)?;
    let mut twice_wins: u128 = 0;
    for (i, &a) in predicted.iter().enumerate() {
        if !truth[i] {
            continue;
        }
        for (j, &b) in predicted.iter().enumerate() {
            if truth[j] {
                continue;
            }
            twice_wins += match a.total_cmp(&b) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice_wins as f64 / (2 * positives as u128 * negatives as u128) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dof(pose: [f64; FINGER_DOF]) -> HandDoF {
        HandDoF {
            axis_angle: Vec3::new(0.1, 0.2, 0.3),
            translation: Vec3::new(0.01, 0.02, 0.03),
            pose,
        }
    }

    #[test]
    fn noise_keeps_zero_coefficients_and_rigid_dof() {
        let hand = vec![dof([0.0; FINGER_DOF]); 3];
        let noisy = inject_finger_noise(&hand, 5, false);
        assert_eq!(noisy, hand);
        let hand = vec![dof([0.5; FINGER_DOF]); 3];
        let noisy = inject_finger_noise(&hand, 5, false);
        for (a, b) in noisy.iter().zip(&hand) {
            assert_eq!(a.axis_angle, b.axis_angle);
            assert_eq!(a.translation, b.translation);
        }
        assert_ne!(noisy[0].pose, noisy[1].pose);
    }

    #[test]
    fn noise_is_reproducible_and_shared() {
        let hand = vec![dof([0.3; FINGER_DOF]); 4];
        assert_eq!(inject_finger_noise(&hand, 9, true), inject_finger_noise(&hand, 9, true));
        let shared = inject_finger_noise(&hand, 9, true);
        assert!(shared.iter().all(|d| d.pose == shared[0].pose));
        assert_ne!(inject_finger_noise(&hand, 9, true), inject_finger_noise(&hand, 10, true));
    }

    #[test]
    fn noise_moments() {
        let hand = vec![dof([1.0; FINGER_DOF]); 667];
        let factors: Vec<f64> = inject_finger_noise(&hand, 1, false)
            .iter()
            .flat_map(|d| d.pose)
            .collect();
        assert!(factors.len() >= 10_000);
        let n = factors.len() as f64;
        let mean = factors.iter().sum::<f64>() / n;
        let std = (factors.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 0.01);
        assert!((std - 0.1).abs() < 0.01);
    }

    #[test]
    fn mpjpe_examples() {
        let truth: Vec<Vec<Vec3>> = vec![(0..21).map(|j| Vec3::new(j as f64 * 0.01, 0.0, 0.0)).collect(); 2];
        assert_eq!(mpjpe(&truth, &truth).unwrap(), 0.0);
        let shifted: Vec<Vec<Vec3>> = truth
            .iter()
            .map(|f| f.iter().map(|p| p + Vec3::new(0.003, 0.0, 0.0)).collect())
            .collect();
        assert!((mpjpe(&shifted, &truth).unwrap() - 3.0).abs() < 1e-9);
        let two = vec![vec![Vec3::zeros(); 2]];
        let mixed = vec![vec![Vec3::new(0.0, 0.002, 0.0), Vec3::new(0.0, 0.0, 0.004)]];
        assert!((mpjpe(&mixed, &two).unwrap() - 3.0).abs() < 1e-9);
        assert!(mpjpe(&mixed, &[]).is_err());
        assert!(mpjpe(&mixed, &[vec![Vec3::zeros(); 3]]).is_err());
    }

    #[test]
    fn four_point_roc() {
        let p = [0.9, 0.8, 0.3, 0.1];
        let t = [true, false, true, false];
        assert_eq!(roc_auc(&p, &t).unwrap(), 0.75);
        assert_eq!(brute_force_roc_auc(&p, &t).unwrap(), 0.75);
        // Thresholds 0.9 (P=1, +1/2 recall) and 0.3 (P=2/3, +1/2 recall).
        assert!((pr_auc(&p, &t).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_tied() {
        let t = [true, true, false, false, false];
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2, 0.0], &t).unwrap(), 1.0);
        assert_eq!(pr_auc(&[0.9, 0.8, 0.1, 0.2, 0.0], &t).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 5], &t).unwrap(), 0.5);
        assert!((pr_auc(&[0.4; 5], &t).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn degenerate_truth() {
        let e = roc_auc(&[0.1, 0.2], &[true, true]).unwrap_err();
        assert!(e.to_string().starts_with("undefined AUC"));
        assert!(pr_auc(&[0.1, 0.2], &[false, false]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn labelled_drops_unlabelled() {
        let (p, t) = labelled(&[0.1, 0.2, 0.3], &[Some(true), None, Some(false)]).unwrap();
        assert_eq!(p, vec![0.1, 0.3]);
        assert_eq!(t, vec![true, false]);
    }

    fn grasp() -> SceneTrajectory {
        use crate::scenegen::{generate_static_grasp, GraspConfig, GraspStyle, ObjectShape};
        let mut cfg = GraspConfig::new(ObjectShape::Box, GraspStyle::Pinch, 3, 2);
        cfg.object_spacing = 0.007;
        generate_static_grasp(&cfg).unwrap().scene
    }

    #[test]
    fn far_object_has_no_contact() {
        let scene = grasp();
        let mut object = scene.object.clone();
        for o in object.iter_mut() {
            o.translation.y += 1.0;
        }
        let far = scene.with_poses(object, scene.hand.clone());
        let params = ContactParams::new(0.002, 0.5).unwrap();
        let map = contact_map_from_pose(&far, &params).unwrap();
        assert_eq!(map.probabilities.len(), scene.object_mesh.vertex_count());
        assert!(map.probabilities.iter().all(|&p| p < 1e-6));
    }

    #[test]
    fn map_follows_distance_order() {
        let scene = grasp();
        let params = ContactParams::new(0.002, 0.5).unwrap();
        let one = scene.with_poses(scene.object[..1].to_vec(), scene.hand[..1].to_vec());
        let map = contact_map_from_pose(&one, &params).unwrap();
        let d = object_hand_distances(&one, 0).unwrap();
        for i in 0..d.len() {
            assert_eq!(map.probabilities[i], contact_probability(d[i], &params));
            for j in 0..d.len() {
                if d[i] < d[j] {
                    assert!(map.probabilities[i] >= map.probabilities[j]);
                }
            }
        }
        assert!(map.probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(contact_probability(0.0, &params), 0.5);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..8).prop_map(|k| k as f64 / 8.0), 0.0f64..1.0], n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both classes", |(_, t)| t.iter().any(|&b| b) && t.iter().any(|&b| !b))
        })
    }

    proptest! {
        #[test]
        fn rank_statistic_equals_pairwise((p, t) in instance()) {
            prop_assert_eq!(roc_auc(&p, &t).unwrap(), brute_force_roc_auc(&p, &t).unwrap());
        }

        #[test]
        fn aucs_lie_in_unit_interval((p, t) in instance()) {
            let r = roc_auc(&p, &t).unwrap();
            let a = pr_auc(&p, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(a > 0.0 && a <= 1.0 + 1e-12);
        }

        #[test]
        fn monotone_maps_preserve_aucs((p, t) in instance(), scale in 0.1f64..10.0, shift in -3.0f64..3.0) {
            let q: Vec<f64> = p.iter().map(|x| (scale * x + shift).exp()).collect();
            prop_assert_eq!(roc_auc(&p, &t).unwrap(), roc_auc(&q, &t).unwrap());
            prop_assert_eq!(pr_auc(&p, &t).unwrap(), pr_auc(&q, &t).unwrap());
        }

        #[test]
        fn mpjpe_ignores_shared_rigid_motion(
            pts in prop::collection::vec((-0.1f64..0.1, -0.1f64..0.1, -0.1f64..0.1), 42),
            axis in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
            shift in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
        ) {
            let v: Vec<Vec3> = pts.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let (a, b) = (vec![v[..21].to_vec()], vec![v[21..].to_vec()]);
            let r = nalgebra::Rotation3::new(Vec3::new(axis.0, axis.1, axis.2));
            let s = Vec3::new(shift.0, shift.1, shift.2);
            let move_all = |f: &Vec<Vec<Vec3>>| -> Vec<Vec<Vec3>> {
                f.iter().map(|fr| fr.iter().map(|p| r * p + s).collect()).collect()
            };
            let before = mpjpe(&a, &b).unwrap();
            let after = mpjpe(&move_all(&a), &move_all(&b)).unwrap();
            prop_assert!((before - after).abs() < 1e-9 * before.max(1.0));
        }
    }
}
