//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.
//!
//! Run with `cargo test -p forcefit-core --test acceptance -- --nocapture`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use forcefit::contact::{annealed_z, contact_probability, AnnealSchedule, ContactParams};
use forcefit::diffcore::{probe_all, BatchSpec, EvalOptions, ParamVector, Problem};
use forcefit::energy::{e_physics, EnergyWeights, Term};
use forcefit::eval::{evaluate_scene, inject_finger_noise, object_hand_distances, pr_auc, roc_auc, MetricsReport};
use forcefit::forces::{finite_difference_dynamics, ForceField, PhysicsConstants};
use forcefit::geometry::Vec3;
use forcefit::refine::{refine, RefineConfig, RunManifest};
use forcefit::scene::SceneTrajectory;
use forcefit::scenegen::{generate_static_grasp, GraspConfig, GraspStyle, ObjectShape, SyntheticScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn run(number: usize, name: &str, check: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {number} {name}: {} ({}; {:.1} s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

// ---- 1: gradient ---------------------------------------------------------

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut cfg = GraspConfig::new(ObjectShape::Box, GraspStyle::Pinch, 4, 3);
    cfg.object_spacing = 0.007;
    let scene = generate_static_grasp(&cfg).unwrap().scene;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut object = scene.object.clone();
    let mut hand = scene.hand.clone();
    for t in 0..scene.frames() {
        for k in 0..3 {
            object[t].axis_angle[k] += rng.random_range(-0.01..0.01);
            object[t].translation[k] += rng.random_range(-1e-3..1e-3);
            hand[t].translation[k] += rng.random_range(-1e-3..1e-3);
        }
        hand[t].pose[3] += 0.05;
        for c in hand[t].pose.iter_mut() {
            *c += rng.random_range(-0.01..0.01);
        }
    }
    let field = ForceField::glorot(64, 3).unwrap();
    let options = EvalOptions::new(
        EnergyWeights::default(),
        PhysicsConstants::default(),
        ContactParams::new(0.01, 0.5).unwrap(),
    );
    let problem = Problem::new(&scene, options, field.clone()).unwrap();
    let params = ParamVector::new(&object, &hand, &field).unwrap();
    let batch = BatchSpec {
        frames: vec![2, 3],
        ..BatchSpec::full(&scene)
    };
    let report = problem.evaluate_with_gradient(&params, &batch).unwrap();
    let inactive: Vec<Term> = Term::ALL
        .into_iter()
        .filter(|&t| report.breakdown.parts.get(t) <= 0.0)
        .collect();
    let probes = probe_all(&problem, &params, &batch, 1e-6).unwrap();
    let mut checked = 0usize;
    let mut good = 0usize;
    let mut worst = 0.0f64;
    for (a, p) in report.gradient.iter().zip(&probes) {
        if p.crosses_kink {
            continue;
        }
        checked += 1;
        let rel = (a - p.derivative).abs() / a.abs().max(p.derivative.abs()).max(1e-300);
        worst = worst.max(rel);
        if rel < 1e-4 {
            good += 1;
        }
    }
    let elapsed = start.elapsed();
    let fraction = good as f64 / checked as f64;
    verdict(
        inactive.is_empty() && fraction >= 0.999 && elapsed < Duration::from_secs(120),
        format!(
            "{good}/{checked} coordinates below 1e-4 ({} near kinks), worst {worst:.2e}, inactive terms {inactive:?}",
            probes.len() - checked
        ),
    )
}

// ---- 2: force invariants -------------------------------------------------

fn force_invariants() -> Verdict {
    const SAMPLES: usize = 10_000;
    let mut cfg = GraspConfig::new(ObjectShape::Sphere, GraspStyle::Pinch, 3, 5);
    cfg.object_spacing = 0.007;
    let scene = generate_static_grasp(&cfg).unwrap().scene;
    let consts = PhysicsConstants::default();
    let template = ForceField::glorot(16, 0).unwrap();
    let mut problem = Problem::new(
        &scene,
        EvalOptions::new(EnergyWeights::default(), consts, ContactParams::new(0.01, 0.5).unwrap()),
        template.clone(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n_obj = scene.object_mesh.vertex_count();
    let (mut forces, mut violations) = (0usize, 0usize);
    let mut first = None;
    for s in 0..SAMPLES {
        let scale = rng.random_range(0.1..4.0);
        let flat: Vec<f64> = (0..template.param_count())
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        let mut field = template.clone();
        field.set_flat(&flat).unwrap();
        let mut object = scene.object.clone();
        let mut hand = scene.hand.clone();
        for t in 0..scene.frames() {
            for k in 0..3 {
                object[t].axis_angle[k] += rng.random_range(-0.5..0.5);
                object[t].translation[k] += rng.random_range(-5e-3..5e-3);
            }
            for c in hand[t].pose.iter_mut() {
                *c *= rng.random_range(0.8..1.2);
            }
        }
        problem.set_contact(ContactParams::new(rng.random_range(0.002..0.03), 0.5).unwrap());
        let params = ParamVector::new(&object, &hand, &field).unwrap();
        let t = rng.random_range(0..scene.frames());
        let mut verts: Vec<usize> = (0..16).map(|_| rng.random_range(0..n_obj)).collect();
        verts.sort_unstable();
        verts.dedup();
        let batch = BatchSpec {
            frames: vec![t],
            object_vertices: verts.clone(),
            hand_vertices: Vec::new(),
        };
        let eval = problem.evaluate(&params, &batch).unwrap();
        let posed = scene.with_poses(object, hand).posed_object(t);
        let normals = posed.normals();
        for (st, &v) in eval.states[0].iter().zip(&verts) {
            forces += 1;
            let n = normals[v];
            let fn_ = st.normal_force;
            let fs = st.friction_force;
            let mag = fn_.norm();
            let ok_cap = mag <= consts.max_normal_force;
            let ok_dir = fn_.cross(&n).norm() <= 1e-9 * mag && fn_.dot(&n) <= 0.0;
            let ok_orth = fs.dot(&fn_).abs() <= 1e-9 * fs.norm() * mag;
            // A few ulps of slack on the friction cone, from rounding in tanh(r) * mu * |f_n|.
            let ok_cone = fs.norm() <= consts.friction * mag * (1.0 + 4.0 * f64::EPSILON);
            if !(ok_cap && ok_dir && ok_orth && ok_cone) {
                violations += 1;
                first.get_or_insert(format!(
                    "sample {s} vertex {v}: cap {ok_cap} dir {ok_dir} orth {ok_orth} cone {ok_cone}"
                ));
            }
        }
    }
    verdict(
        violations == 0,
        format!(
            "{SAMPLES} samples, {forces} forces, {violations} violations{}",
            first.map(|f| format!(", first {f}")).unwrap_or_default()
        ),
    )
}

// ---- 3: contact identities -----------------------------------------------

fn contact_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for p0 in [0.1, 0.5, 0.9] {
        let params = ContactParams::new(0.01, p0).unwrap();
        if contact_probability(0.0, &params) != p0 {
            failures.push(format!("p(0) != {p0}"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(-0.05..0.05);
        let z = rng.random_range(0.001..0.05);
        let alpha = rng.random_range(0.1..10.0);
        let p0 = rng.random_range(0.05..0.95);
        let a = contact_probability(d, &ContactParams::new(z, p0).unwrap());
        let b = contact_probability(alpha * d, &ContactParams::new(alpha * z, p0).unwrap());
        worst = worst.max((a - b).abs());
    }
    if worst > 1e-12 {
        failures.push(format!("scale identity off by {worst:e}"));
    }
    let schedule = AnnealSchedule::new(0.030, 0.002, 300).unwrap();
    let first = annealed_z(0, &schedule).unwrap();
    let last = annealed_z(299, &schedule).unwrap();
    if first != 0.030 || last != 0.002 {
        failures.push(format!("endpoints {first} and {last}"));
    }
    if AnnealSchedule::default() != schedule {
        failures.push("default schedule differs".into());
    }
    verdict(
        failures.is_empty(),
        format!("scale identity worst {worst:.1e}; {}", if failures.is_empty() { "no failures".into() } else { failures.join(", ") }),
    )
}

// ---- 4: equilibrium certificates -----------------------------------------

fn certificate_residuals(synth: &SyntheticScene, consts: &PhysicsConstants) -> (f64, f64) {
    let scene = &synth.scene;
    let cert = &synth.certificate;
    let weight = consts.weight();
    let translations: Vec<Vec3> = scene.object.iter().map(|o| o.translation).collect();
    let fd = finite_difference_dynamics(&translations, consts).unwrap();
    let mut learned = Vec::new();
    let mut observed = Vec::new();
    let mut worst_net = 0.0f64;
    for t in 0..scene.frames() {
        let net = cert.net_force(t, &weight);
        worst_net = worst_net.max(net.norm());
        if let Some(f) = fd.net_force[t] {
            learned.push(net);
            observed.push(f);
        }
    }
    (e_physics(&learned, &observed).unwrap(), worst_net)
}

fn oracle_equilibrium(extra: &[SyntheticScene]) -> Verdict {
    let mut scenes = 0usize;
    let mut worst_e = 0.0f64;
    let mut worst_net = 0.0f64;
    let mut check = |synth: &SyntheticScene| {
        let consts = PhysicsConstants {
            mass: synth.scene.mass,
            frame_dt: synth.scene.frame_dt,
            ..PhysicsConstants::default()
        };
        let (e, net) = certificate_residuals(synth, &consts);
        worst_e = worst_e.max(e);
        worst_net = worst_net.max(net);
        scenes += 1;
    };
    for shape in ObjectShape::ALL {
        for style in GraspStyle::ALL {
            for seed in 100..104 {
                check(&generate_static_grasp(&GraspConfig::new(shape, style, 5, seed)).unwrap());
            }
        }
    }
    extra.iter().for_each(&mut check);
    verdict(
        worst_e < 1e-10 && worst_net < 1e-9,
        format!("{scenes} scenes, worst physics energy {worst_e:.2e}, worst net force {worst_net:.2e} N"),
    )
}

// ---- 5, 7, 8: synthetic refinement ---------------------------------------

const SCENES: usize = 20;
const FRAMES: usize = 30;
const EVAL_Z: f64 = 0.002;

struct SceneRun {
    before: MetricsReport,
    after: MetricsReport,
    deep_before: usize,
    deep_after: usize,
    manifest: String,
    seconds: f64,
}

fn deep_vertices(scene: &SceneTrajectory) -> usize {
    (0..scene.frames())
        .map(|t| object_hand_distances(scene, t).unwrap().iter().filter(|&&d| d < -0.002).count())
        .sum()
}

fn synthetic_scene(i: usize) -> SyntheticScene {
    let shape = ObjectShape::ALL[i % 3];
    let style = GraspStyle::ALL[(i / 3) % 2];
    generate_static_grasp(&GraspConfig::new(shape, style, FRAMES, i as u64)).unwrap()
}

fn refine_scene(i: usize, synth: &SyntheticScene) -> SceneRun {
    let start = Instant::now();
    let truth = &synth.scene;
    let noise_seed = 1000 + i as u64;
    let mut config = RefineConfig {
        sample_vertices: 1000,
        seed: i as u64,
        ..RefineConfig::default().with_epochs(100)
    };
    config.consts.mass = truth.mass;
    config.consts.frame_dt = truth.frame_dt;
    let noisy = truth.with_poses(
        truth.object.clone(),
        inject_finger_noise(&truth.hand, noise_seed, config.share_finger_pose),
    );
    let outcome = refine(&noisy, &config).unwrap();
    let params = ContactParams::new(EVAL_Z, config.p0).unwrap();
    let before = evaluate_scene(&noisy, truth, &synth.truth, &params).unwrap();
    let after = evaluate_scene(&outcome.scene, truth, &synth.truth, &params).unwrap();
    let manifest = RunManifest {
        config,
        scene: format!("synthetic-{i}"),
        model: None,
        noise_seed: Some(noise_seed),
        frames: truth.frames(),
        history: outcome.history,
    };
    SceneRun {
        before,
        after,
        deep_before: deep_vertices(&noisy),
        deep_after: deep_vertices(&outcome.scene),
        manifest: manifest.to_text(),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn refine_all(scenes: &[SyntheticScene]) -> Vec<SceneRun> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let r = refine_scene(i, s);
            println!(
                "  scene {i:2} {}: mpjpe {:.3} -> {:.3} mm, pr-auc {:.4} -> {:.4}, roc-auc {:.4} -> {:.4}, deep {} -> {}, {:.0} s",
                s.scene.object_mesh.vertex_count(),
                r.before.mpjpe_mm,
                r.after.mpjpe_mm,
                r.before.pr_auc,
                r.after.pr_auc,
                r.before.roc_auc,
                r.after.roc_auc,
                r.deep_before,
                r.deep_after,
                r.seconds
            );
            r
        })
        .collect()
}

fn refinement_improves(runs: &[SceneRun]) -> Verdict {
    let n = runs.len() as f64;
    let mpjpe_better = runs.iter().filter(|r| r.after.mpjpe_mm < r.before.mpjpe_mm).count();
    let reduction = runs
        .iter()
        .map(|r| (r.before.mpjpe_mm - r.after.mpjpe_mm) / r.before.mpjpe_mm)
        .sum::<f64>()
        / n;
    let pr_better = runs.iter().filter(|r| r.after.pr_auc > r.before.pr_auc).count();
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    verdict(
        mpjpe_better as f64 / n >= 0.9 && reduction >= 0.3 && pr_better as f64 / n >= 0.7 && slowest <= 600.0,
        format!(
            "MPJPE improved in {mpjpe_better}/{} (need 90%), mean relative reduction {:.1}% (need 30%), PR-AUC improved in {pr_better}/{} (need 70%), slowest scene {slowest:.0} s",
            runs.len(),
            100.0 * reduction,
            runs.len()
        ),
    )
}

fn penetration_discipline(runs: &[SceneRun]) -> Verdict {
    let held = runs.iter().filter(|r| r.deep_after <= r.deep_before).count();
    let before: usize = runs.iter().map(|r| r.deep_before).sum();
    let after: usize = runs.iter().map(|r| r.deep_after).sum();
    verdict(
        held as f64 / runs.len() as f64 >= 0.95,
        format!("deep vertex count did not grow in {held}/{} scenes (total {before} -> {after})", runs.len()),
    )
}

fn determinism(first: &[SceneRun], scenes: &[SyntheticScene]) -> Verdict {
    let again = refine_all(scenes);
    let bits = |m: &MetricsReport| [m.mpjpe_mm.to_bits(), m.pr_auc.to_bits(), m.roc_auc.to_bits()];
    let differing: Vec<usize> = first
        .iter()
        .zip(&again)
        .enumerate()
        .filter(|(_, (a, b))| {
            a.manifest != b.manifest || bits(&a.before) != bits(&b.before) || bits(&a.after) != bits(&b.after)
        })
        .map(|(i, _)| i)
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} scenes rerun, differing: {differing:?}", again.len()),
    )
}

// ---- 6: metric oracles ---------------------------------------------------

fn pairwise_auc(predicted: &[f64], truth: &[bool]) -> f64 {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (a, &ta) in predicted.iter().zip(truth) {
        for (b, &tb) in predicted.iter().zip(truth) {
            if ta && !tb {
                pairs += 1;
                twice += if a > b { 2 } else if a == b { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    // Coarse levels force ties.
    let levels = rng.random_range(2..50);
    let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
    truth[0] = true;
    truth[1] = false;
    let predicted = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (predicted, truth)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (p, t) = random_instance(&mut rng);
        if roc_auc(&p, &t).unwrap() != pairwise_auc(&p, &t) {
            mismatches += 1;
        }
    }
    let example = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[true, false, true, false]).unwrap();
    let mut not_invariant = 0;
    for _ in 0..100 {
        let (p, t) = random_instance(&mut rng);
        let (a, b) = (rng.random_range(0.1..5.0), rng.random_range(-2.0..2.0));
        let k = rng.random_range(0.5..3.0);
        let mapped: Vec<f64> = p.iter().map(|x| (a * x.powf(k) + b).exp()).collect();
        if roc_auc(&p, &t).unwrap() != roc_auc(&mapped, &t).unwrap()
            || pr_auc(&p, &t).unwrap() != pr_auc(&mapped, &t).unwrap()
        {
            not_invariant += 1;
        }
    }
    verdict(
        mismatches == 0 && example == 0.75 && not_invariant == 0,
        format!("{mismatches} pairwise mismatches, example {example}, {not_invariant} monotone-map failures"),
    )
}

#[test]
fn primary_criteria() {
    let mut results = Vec::new();
    results.push(run(1, "gradient", gradient_correctness));
    results.push(run(2, "force invariants", force_invariants));
    results.push(run(3, "contact identities", contact_identities));
    results.push(run(6, "metric oracles", metric_oracles));

    let scenes: Vec<SyntheticScene> = (0..SCENES).map(synthetic_scene).collect();
    results.push(run(4, "equilibrium", || oracle_equilibrium(&scenes)));
    let runs = refine_all(&scenes);
    results.push(run(5, "refinement", || refinement_improves(&runs)));
    results.push(run(7, "penetration", || penetration_discipline(&runs)));
    results.push(run(8, "determinism", || determinism(&runs, &scenes)));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
