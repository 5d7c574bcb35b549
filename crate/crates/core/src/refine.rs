//! Adam refinement of poses and the force field over frame batches.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contact::{annealed_z, AnnealSchedule, ContactError, ContactParams};
use crate::diffcore::{finger_range, BatchSpec, DiffError, EvalOptions, ParamVector, Problem};
use crate::energy::{EnergyBreakdown, EnergyError, EnergyWeights, Term};
use crate::forces::{ForceError, ForceField, PhysicsConstants};
use crate::kinematics::FINGER_DOF;
use crate::scene::{SceneError, SceneTrajectory};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("invalid refinement config: {0}")]
    Config(String),
    #[error("parameter length {params} does not match gradient length {grad} and state length {state}")]
    Shape { params: usize, grad: usize, state: usize },
    #[error("non-finite energy at epoch {epoch}, batch {batch}: term {term}")]
    NonFinite { epoch: usize, batch: usize, term: Term },
    #[error("non-finite gradient at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Contact(#[from] ContactError),
    #[error(transparent)]
    Force(#[from] ForceError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<(), RefineError> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) {
            return Err(RefineError::Config(format!(
                "decay rates ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(RefineError::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }
}

/// One bias-corrected Adam update with a single learning rate.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), RefineError> {
    adam_step_with(params, grad, state, hyper, |_| lr)
}

/// Adam update where coordinate `k` uses learning rate `lr(k)`.
pub fn adam_step_with(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    lr: impl Fn(usize) -> f64,
) -> Result<(), RefineError> {
    if params.len() != grad.len() || params.len() != state.first.len() {
        return Err(RefineError::Shape {
            params: params.len(),
            grad: grad.len(),
            state: state.first.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for k in 0..params.len() {
        let g = grad[k];
        let m = hyper.beta1 * state.first[k] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.second[k] + (1.0 - hyper.beta2) * g * g;
        state.first[k] = m;
        state.second[k] = v;
        params[k] -= lr(k) * (m / c1) / ((v / c2).sqrt() + hyper.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub epochs: usize,
    pub batch_frames: usize,
    pub sample_vertices: usize,
    pub lr_pose: f64,
    pub lr_field: f64,
    pub adam: AdamHyper,
    pub share_finger_pose: bool,
    pub seed: u64,
    pub weights: EnergyWeights,
    pub anneal: AnnealSchedule,
    pub p0: f64,
    pub consts: PhysicsConstants,
    /// Hidden layer width of the force field.
    pub hidden: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_frames: 40,
            sample_vertices: 5000,
            lr_pose: 1e-4,
            lr_field: 1e-3,
            adam: AdamHyper::default(),
            share_finger_pose: true,
            seed: 0,
            weights: EnergyWeights::default(),
            anneal: AnnealSchedule::default(),
            p0: 0.5,
            consts: PhysicsConstants::default(),
            hidden: 64,
        }
    }
}

impl RefineConfig {
    /// Sets the epoch count of both the loop and the width schedule.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.anneal.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        if self.epochs == 0 {
            return Err(RefineError::Config("epochs must be at least 1".into()));
        }
        if self.batch_frames == 0 {
            return Err(RefineError::Config("batch frames must be at least 1".into()));
        }
        if self.sample_vertices == 0 {
            return Err(RefineError::Config("sampled vertices must be at least 1".into()));
        }
        if self.anneal.epochs != self.epochs {
            return Err(RefineError::Config(format!(
                "anneal schedule spans {} epochs but the run has {}",
                self.anneal.epochs, self.epochs
            )));
        }
        for (name, lr) in [("pose", self.lr_pose), ("field", self.lr_field)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(RefineError::Config(format!("{name} learning rate {lr}")));
            }
        }
        if self.hidden == 0 {
            return Err(RefineError::Config("hidden width must be at least 1".into()));
        }
        self.adam.validate()?;
        self.anneal.validate()?;
        self.weights.validate()?;
        self.consts.validate()?;
        ContactParams::new(self.anneal.z_end, self.p0)?;
        Ok(())
    }
}

/// Energy summed over the batches of one epoch, evaluated before each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub z: f64,
    pub batches: usize,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub scene: SceneTrajectory,
    pub field: ForceField,
    pub history: Vec<EpochRecord>,
    /// Terms disabled because the scene is too short.
    pub skipped: Vec<Term>,
    /// Wall-clock seconds per epoch.
    pub epoch_seconds: Vec<f64>,
}

/// Contiguous blocks of `size` frames; the last may be shorter.
pub fn frame_blocks(frames: usize, size: usize) -> Vec<Vec<usize>> {
    (0..frames)
        .step_by(size.max(1))
        .map(|s| (s..(s + size).min(frames)).collect())
        .collect()
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut v = index::sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Makes every frame carry frame 0's finger coefficients, after setting
/// those to the per-coefficient mean if the frames disagree.
fn tie_fingers(params: &mut ParamVector) {
    let frames = params.frames();
    let first = finger_range(params, 0);
    let reference: Vec<f64> = params.as_slice()[first.clone()].to_vec();
    let all_equal = (1..frames).all(|t| params.as_slice()[finger_range(params, t)] == reference[..]);
    let shared: Vec<f64> = if all_equal {
        reference
    } else {
        (0..FINGER_DOF)
            .map(|j| (0..frames).map(|t| params.as_slice()[finger_range(params, t).start + j]).sum::<f64>() / frames as f64)
            .collect()
    };
    for t in 0..frames {
        let r = finger_range(params, t);
        params.as_mut_slice()[r].copy_from_slice(&shared);
    }
}

/// Moves every frame's finger gradient onto frame 0.
fn pool_finger_gradient(params: &ParamVector, grad: &mut [f64]) {
    let first = finger_range(params, 0).start;
    for t in 1..params.frames() {
        let r = finger_range(params, t);
        for j in 0..FINGER_DOF {
            grad[first + j] += grad[r.start + j];
            grad[r.start + j] = 0.0;
        }
    }
}

pub fn refine(scene: &SceneTrajectory, config: &RefineConfig) -> Result<RefineOutcome, RefineError> {
    refine_from(scene, scene, config)
}

/// Refines starting from the poses of `start`, with `observed` as the
/// deviation reference.
pub fn refine_from(
    observed: &SceneTrajectory,
    start: &SceneTrajectory,
    config: &RefineConfig,
) -> Result<RefineOutcome, RefineError> {
    config.validate()?;
    observed.validate()?;
    start.validate()?;
    if start.frames() != observed.frames() {
        return Err(RefineError::Config(format!(
            "start has {} frames but the observation has {}",
            start.frames(),
            observed.frames()
        )));
    }
    let scene = observed;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let template = ForceField::glorot(config.hidden, rng.next_u64())?;
    let contact = ContactParams::new(config.anneal.z_start, config.p0)?;
    let options = EvalOptions::new(config.weights, config.consts, contact);
    let mut problem = Problem::new(scene, options, template.clone())?;
    let mut params = ParamVector::new(&start.object, &start.hand, &template)?;
    if config.share_finger_pose {
        tie_fingers(&mut params);
    }
    let mut adam = AdamState::new(params.len());
    let field_start = params.field_offset();
    let (lr_pose, lr_field) = (config.lr_pose, config.lr_field);
    let rate = |k: usize| if k < field_start { lr_pose } else { lr_field };

    let blocks = frame_blocks(scene.frames(), config.batch_frames);
    let object_count = scene.object_mesh.vertex_count();
    let hand_count = scene.hand_model.vertex_count();
    let mut history = Vec::with_capacity(config.epochs);
    let mut epoch_seconds = Vec::with_capacity(config.epochs);
    let mut skipped = Vec::new();

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let z = annealed_z(epoch, &config.anneal)?;
        problem.set_contact(contact.with_z(z)?);
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut rng);
        let mut record = EpochRecord {
            epoch,
            z,
            batches: 0,
            energy: EnergyBreakdown::default(),
        };
        for (batch, &b) in order.iter().enumerate() {
            let spec = BatchSpec {
                frames: blocks[b].clone(),
                object_vertices: sample_indices(&mut rng, object_count, config.sample_vertices),
                hand_vertices: sample_indices(&mut rng, hand_count, config.sample_vertices),
            };
            let report = match problem.evaluate_with_gradient(&params, &spec) {
                Ok(r) => r,
                Err(DiffError::NonFinite { term }) => return Err(RefineError::NonFinite { epoch, batch, term }),
                Err(e) => return Err(e.into()),
            };
            if report.gradient.iter().any(|g| !g.is_finite()) {
                return Err(RefineError::NonFiniteGradient { epoch, batch });
            }
            for term in &report.skipped {
                if !skipped.contains(term) {
                    log::warn!("{term} term disabled: the scene has {} frames", scene.frames());
                    skipped.push(*term);
                }
            }
            record.energy.parts.add(&report.breakdown.parts);
            record.energy.total += report.breakdown.total;
            record.batches += 1;

            let mut grad = report.gradient;
            if config.share_finger_pose {
                pool_finger_gradient(&params, &mut grad);
            }
            adam_step_with(params.as_mut_slice(), &grad, &mut adam, &config.adam, rate)?;
            if config.share_finger_pose {
                tie_fingers(&mut params);
            }
        }
        history.push(record);
        epoch_seconds.push(start.elapsed().as_secs_f64());
    }

    let field = params.field(&template)?;
    Ok(RefineOutcome {
        scene: scene.with_poses(params.objects(), params.hands()),
        field,
        history,
        skipped,
        epoch_seconds,
    })
}

/// Everything needed to reproduce a run, plus its energy history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RefineConfig,
    pub scene: String,
    /// Skinning model overriding the one named in the scene file.
    pub model: Option<String>,
    pub noise_seed: Option<u64>,
    pub frames: usize,
    pub history: Vec<EpochRecord>,
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, RefineError> {
        serde_json::from_str(text).map_err(|e| RefineError::Config(format!("manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_static_grasp, GraspConfig, GraspStyle, ObjectShape};

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(2);
        let mut x = vec![1.0, -2.0];
        adam_step(&mut x, &[1.0, 1.0], &mut state, 0.1, &hyper).unwrap();
        let m = state.first_moment().to_vec();
        let before = x.clone();
        adam_step(&mut x, &[0.0, 0.0], &mut state, 0.0, &hyper).unwrap();
        assert_eq!(x, before);
        assert!(state.first_moment()[0] < m[0]);
        let mut state = AdamState::new(2);
        let mut y = vec![0.5, 0.25];
        adam_step(&mut y, &[0.0, 0.0], &mut state, 0.1, &hyper).unwrap();
        assert_eq!(y, vec![0.5, 0.25]);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(3);
        let mut x = vec![0.0; 3];
        adam_step(&mut x, &[3.0, -0.2, 1e-3], &mut state, 0.01, &hyper).unwrap();
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        for (xi, g) in x.iter().zip([3.0f64, -0.2, 1e-3]) {
            let oracle = -0.01 * g / (g.abs() + 1e-8);
            assert!((xi - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_keeps_unit_ratio() {
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(1);
        let mut x = vec![0.0];
        for _ in 0..5 {
            let before = x[0];
            adam_step(&mut x, &[2.0], &mut state, 0.1, &hyper).unwrap();
            assert!((before - x[0] - 0.1).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(1);
        let mut x = vec![1.0];
        let mut last = 1.0f64;
        for _ in 0..10 {
            let g = 2.0 * x[0];
            adam_step(&mut x, &[g], &mut state, 0.1, &hyper).unwrap();
            assert!(x[0].abs() < last);
            last = x[0].abs();
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut state = AdamState::new(2);
        let mut x = vec![0.0; 3];
        assert!(matches!(
            adam_step(&mut x, &[0.0; 3], &mut state, 0.1, &AdamHyper::default()),
            Err(RefineError::Shape { .. })
        ));
    }

    #[test]
    fn blocks_cover_frames_in_order() {
        assert_eq!(frame_blocks(5, 2), vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(frame_blocks(3, 40), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig::default().validate().is_ok());
        assert!(RefineConfig::default().with_epochs(0).validate().is_err());
        let mut c = RefineConfig::default();
        c.epochs = 10;
        assert!(c.validate().is_err());
        c = RefineConfig::default();
        c.batch_frames = 0;
        assert!(c.validate().is_err());
        c = RefineConfig::default();
        c.sample_vertices = 0;
        assert!(c.validate().is_err());
    }

    fn small_scene() -> SceneTrajectory {
        let mut cfg = GraspConfig::new(ObjectShape::Box, GraspStyle::Pinch, 4, 5);
        cfg.object_spacing = 0.007;
        generate_static_grasp(&cfg).unwrap().scene
    }

    fn small_config() -> RefineConfig {
        RefineConfig {
            batch_frames: 2,
            sample_vertices: 150,
            hidden: 8,
            ..RefineConfig::default().with_epochs(4)
        }
    }

    #[test]
    fn zero_weights_leave_poses_unchanged() {
        let scene = small_scene();
        let mut cfg = small_config();
        cfg.weights = EnergyWeights::zero();
        let out = refine(&scene, &cfg).unwrap();
        assert_eq!(out.scene.object, scene.object);
        assert_eq!(out.scene.hand, scene.hand);
    }

    #[test]
    fn deviation_pulls_back_toward_observation() {
        let scene = small_scene();
        let mut cfg = small_config().with_epochs(30);
        cfg.weights = EnergyWeights {
            deviation: 1.0,
            ..EnergyWeights::zero()
        };
        cfg.lr_pose = 1e-3;
        let mut object = scene.object.clone();
        let mut hand = scene.hand.clone();
        for t in 0..4 {
            object[t].translation.x += 0.004;
            hand[t].translation.y -= 0.003;
        }
        let start = scene.with_poses(object, hand);
        let offset = |s: &SceneTrajectory| -> f64 {
            (0..4)
                .map(|t| {
                    (s.object[t].translation - scene.object[t].translation).norm()
                        + (s.hand[t].translation - scene.hand[t].translation).norm()
                })
                .sum()
        };
        let out = refine_from(&scene, &start, &cfg).unwrap();
        assert!(offset(&out.scene) < 0.5 * offset(&start));
        let first = out.history.first().unwrap().energy.total;
        let last = out.history.last().unwrap().energy.total;
        assert!(last < first);
    }

    #[test]
    fn shared_fingers_stay_identical() {
        let scene = small_scene();
        let mut hand = scene.hand.clone();
        hand[2].pose[4] += 0.02;
        let scene = scene.with_poses(scene.object.clone(), hand);
        let out = refine(&scene, &small_config()).unwrap();
        for t in 1..4 {
            assert_eq!(out.scene.hand[t].pose, out.scene.hand[0].pose);
        }
        assert_ne!(out.scene.hand[0].pose, scene.hand[0].pose);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let scene = small_scene();
        let a = refine(&scene, &small_config()).unwrap();
        let b = refine(&scene, &small_config()).unwrap();
        assert_eq!(a.scene.object, b.scene.object);
        assert_eq!(a.scene.hand, b.scene.hand);
        assert_eq!(a.field.to_flat(), b.field.to_flat());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn short_scene_disables_dynamics() {
        let scene = small_scene();
        let short = scene.with_poses(scene.object[..2].to_vec(), scene.hand[..2].to_vec());
        let out = refine(&short, &small_config()).unwrap();
        assert!(out.skipped.contains(&Term::Physics));
        assert!(out.skipped.contains(&Term::Smooth));
    }

    #[test]
    fn manifest_round_trips() {
        let scene = small_scene();
        let cfg = small_config();
        let out = refine(&scene, &cfg).unwrap();
        let m = RunManifest {
            config: cfg,
            scene: "a.scene".into(),
            model: None,
            noise_seed: Some(4),
            frames: 4,
            history: out.history,
        };
        assert_eq!(RunManifest::from_text(&m.to_text()).unwrap(), m);
    }
}
