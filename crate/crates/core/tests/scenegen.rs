use forcefit::energy::{e_penetration, e_physics};
use forcefit::eval::object_hand_distances;
use forcefit::forces::{finite_difference_dynamics, PhysicsConstants};
use forcefit::geometry::{DistanceMode, MeshDistance, Vec3};
use forcefit::scene::{parse_scene, to_scene_text, SceneFile, BUILTIN_HAND};
use forcefit::scenegen::{generate_static_grasp, GraspConfig, GraspStyle, ObjectShape, SyntheticScene, TRUTH_CONTACT, TRUTH_FREE};

fn all_scenes() -> Vec<SyntheticScene> {
    let mut out = Vec::new();
    for shape in ObjectShape::ALL {
        for style in GraspStyle::ALL {
            for seed in [11, 12] {
                out.push(generate_static_grasp(&GraspConfig::new(shape, style, 3, seed)).unwrap());
            }
        }
    }
    out
}

fn consts(s: &SyntheticScene) -> PhysicsConstants {
    PhysicsConstants {
        mass: s.scene.mass,
        frame_dt: s.scene.frame_dt,
        ..PhysicsConstants::default()
    }
}

#[test]
fn certificates_respect_force_constraints() {
    for s in all_scenes() {
        let c = consts(&s);
        for (t, frame) in s.certificate.frames.iter().enumerate() {
            let posed = s.scene.posed_object(t);
            for ((&v, fn_), fs) in frame.vertices.iter().zip(&frame.normal_forces).zip(&frame.friction_forces) {
                let n = posed.normals()[v];
                let mag = fn_.norm();
                assert!(mag <= c.max_normal_force, "normal force {mag}");
                assert!(fn_.cross(&n).norm() <= 1e-9 * mag.max(1e-300) && fn_.dot(&n) <= 0.0);
                assert!(fs.dot(fn_).abs() <= 1e-9 * fs.norm() * mag);
                assert!(fs.norm() <= c.friction * mag * (1.0 + 1e-12));
            }
            assert!(s.certificate.net_force(t, &c.weight()).norm() < 1e-9);
        }
    }
}

#[test]
fn truth_poses_are_balanced_and_clear() {
    for s in all_scenes() {
        let c = consts(&s);
        let translations: Vec<Vec3> = s.scene.object.iter().map(|o| o.translation).collect();
        let fd = finite_difference_dynamics(&translations, &c).unwrap();
        let (mut learned, mut observed) = (Vec::new(), Vec::new());
        for t in 2..s.scene.frames() {
            learned.push(s.certificate.net_force(t, &c.weight()));
            observed.push(fd.net_force[t].unwrap());
        }
        assert!(e_physics(&learned, &observed).unwrap() < 1e-10);

        for t in 0..s.scene.frames() {
            let object_d = object_hand_distances(&s.scene, t).unwrap();
            let object = MeshDistance::with_mode(&s.scene.posed_object(t), DistanceMode::Surface).unwrap();
            let hand_d: Vec<f64> = s
                .scene
                .hand_model
                .forward(&s.scene.hand[t])
                .vertices
                .iter()
                .map(|v| object.query(v).distance)
                .collect();
            assert_eq!(e_penetration(&object_d, &hand_d, 0.002), 0.0);
        }
    }
}

#[test]
fn truth_labels_respect_the_margin_band() {
    for s in all_scenes() {
        let d = object_hand_distances(&s.scene, 0).unwrap();
        let mut positives = 0;
        for (label, d) in s.truth.iter().zip(&d) {
            match label {
                Some(true) => {
                    positives += 1;
                    assert!(*d < TRUTH_CONTACT, "positive at {d}");
                }
                Some(false) => assert!(*d > TRUTH_FREE, "negative at {d}"),
                None => assert!((TRUTH_CONTACT..=TRUTH_FREE).contains(d)),
            }
        }
        assert!(positives > 0);
    }
}

#[test]
fn sphere_pinch_holds_its_weight_by_friction() {
    let s = generate_static_grasp(&GraspConfig::new(ObjectShape::Sphere, GraspStyle::Pinch, 3, 0)).unwrap();
    let c = consts(&s);
    assert_eq!(c.mass, 0.1);
    let frame = &s.certificate.frames[0];
    let n = s.certificate.sample_count as f64;
    let up: f64 = frame.friction_forces.iter().map(|f| f.y).sum::<f64>() / n;
    let lift: f64 = frame.normal_forces.iter().map(|f| f.y).sum::<f64>() / n;
    let normal: f64 = frame.normal_forces.iter().map(|f| f.norm()).sum::<f64>() / n;
    assert!((up + lift - 0.98).abs() < 1e-9);
    // Contacts sit near the equator, so friction carries nearly all the weight.
    assert!(up >= 0.95 && lift.abs() < 0.03, "friction {up}, normal {lift}");
    assert!(normal >= up / 0.8, "{normal}");
}

#[test]
fn frictionless_side_grip_has_no_certificate() {
    let mut cfg = GraspConfig::new(ObjectShape::Cylinder, GraspStyle::Wrap, 3, 0);
    cfg.consts.friction = 0.0;
    let err = generate_static_grasp(&cfg).unwrap_err();
    assert!(err.to_string().contains("no equilibrium certificate"), "{err}");
}

#[test]
fn fixed_seed_is_bit_identical() {
    let cfg = GraspConfig::new(ObjectShape::Box, GraspStyle::Wrap, 4, 9);
    let file = |s: SyntheticScene| {
        to_scene_text(&SceneFile {
            scene: s.scene,
            object_ref: "object.obj".into(),
            model_ref: BUILTIN_HAND.into(),
            truth: Some(s.truth),
            certificate: Some(s.certificate),
        })
    };
    let a = file(generate_static_grasp(&cfg).unwrap());
    let b = file(generate_static_grasp(&cfg).unwrap());
    assert_eq!(a, b);
    assert!(a.starts_with("SCENE 1"));
}

#[test]
fn scene_text_round_trips() {
    let s = generate_static_grasp(&GraspConfig::new(ObjectShape::Sphere, GraspStyle::Wrap, 3, 4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    forcefit::geometry::write_obj(&dir.path().join("object.obj"), &s.scene.object_mesh).unwrap();
    let file = SceneFile {
        scene: s.scene.clone(),
        object_ref: "object.obj".into(),
        model_ref: BUILTIN_HAND.into(),
        truth: Some(s.truth.clone()),
        certificate: Some(s.certificate.clone()),
    };
    let text = to_scene_text(&file);
    let back = parse_scene(&text, dir.path()).unwrap();
    assert_eq!(back.truth, file.truth);
    assert_eq!(back.certificate, file.certificate);
    assert_eq!(back.scene.hand, s.scene.hand);
    assert_eq!(back.scene.object, s.scene.object);
    assert_eq!(to_scene_text(&back), text);
}
