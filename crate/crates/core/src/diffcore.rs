//! Total energy over a batch of frames and its exact gradient with respect to
//! object poses, hand poses and force-field parameters.
//!
//! The gradient is assembled from hand-written adjoints of each stage:
//! rigid and skinned posing, signed distances, contact probabilities, the
//! force decomposition, the network and the five energy terms.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contact::{contact_probability_with_derivative, ContactParams};
use crate::energy::{penetration_hinge, total_energy, EnergyBreakdown, EnergyParts, EnergyWeights, Term};
use crate::forces::{
    second_difference, vertex_forces, vertex_forces_backward, BatchTape, ForceField, PhysicsConstants,
    VertexForceState, INPUT_DIM,
};
use crate::geometry::{compute_vertex_normals, DistanceMode, GeometryError, MeshDistance, SignedDistanceResult, TriMesh, Vec3};
use crate::kinematics::{
    HandDoF, HandForward, ObjectDoF, RotationJacobian, SkinnedHandModel, FINGER_DOF, HAND_DOF, OBJECT_DOF,
    REPORTED_JOINTS,
};
use crate::scene::SceneTrajectory;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite {term} energy")]
    NonFinite { term: Term },
    #[error("parameter shape mismatch: {0}")]
    Shape(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid options: {0}")]
    Options(String),
}

/// Flat storage of all optimization variables: `T x 6` object DoF, then
/// `T x 21` hand DoF, then the force-field parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    frames: usize,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn new(object: &[ObjectDoF], hand: &[HandDoF], field: &ForceField) -> Result<Self, DiffError> {
        if object.len() != hand.len() {
            return Err(DiffError::Shape(format!(
                "{} object frames vs {} hand frames",
                object.len(),
                hand.len()
            )));
        }
        let frames = object.len();
        let mut data = Vec::with_capacity(frames * (OBJECT_DOF + HAND_DOF) + field.param_count());
        for o in object {
            data.extend_from_slice(&o.to_array());
        }
        for h in hand {
            data.extend_from_slice(&h.to_array());
        }
        data.extend(field.to_flat());
        Ok(Self { frames, data })
    }

    pub fn from_raw(frames: usize, data: Vec<f64>) -> Self {
        Self { frames, data }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn object_offset(&self, t: usize) -> usize {
        OBJECT_DOF * t
    }

    pub fn hand_offset(&self, t: usize) -> usize {
        OBJECT_DOF * self.frames + HAND_DOF * t
    }

    pub fn field_offset(&self) -> usize {
        (OBJECT_DOF + HAND_DOF) * self.frames
    }

    pub fn object(&self, t: usize) -> ObjectDoF {
        let o = self.object_offset(t);
        ObjectDoF::from_array(self.data[o..o + OBJECT_DOF].try_into().unwrap())
    }

    pub fn hand(&self, t: usize) -> HandDoF {
        let o = self.hand_offset(t);
        HandDoF::from_array(self.data[o..o + HAND_DOF].try_into().unwrap())
    }

    pub fn objects(&self) -> Vec<ObjectDoF> {
        (0..self.frames).map(|t| self.object(t)).collect()
    }

    pub fn hands(&self) -> Vec<HandDoF> {
        (0..self.frames).map(|t| self.hand(t)).collect()
    }

    pub fn field_params(&self) -> &[f64] {
        &self.data[self.field_offset()..]
    }

    /// A copy of `template` carrying this vector's network parameters.
    pub fn field(&self, template: &ForceField) -> Result<ForceField, DiffError> {
        let mut f = template.clone();
        f.set_flat(self.field_params()).map_err(|e| DiffError::Shape(e.to_string()))?;
        Ok(f)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Frames and sampled vertices entering one energy evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub frames: Vec<usize>,
    pub object_vertices: Vec<usize>,
    pub hand_vertices: Vec<usize>,
}

impl BatchSpec {
    /// Every frame and every vertex.
    pub fn full(scene: &SceneTrajectory) -> Self {
        Self {
            frames: (0..scene.frames()).collect(),
            object_vertices: (0..scene.object_mesh.vertex_count()).collect(),
            hand_vertices: (0..scene.hand_model.vertex_count()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub weights: EnergyWeights,
    pub consts: PhysicsConstants,
    pub contact: ContactParams,
    pub distance_mode: DistanceMode,
    /// Adds the hand's penetration, deviation and smoothness terms.
    pub include_hand: bool,
}

impl EvalOptions {
    pub fn new(weights: EnergyWeights, consts: PhysicsConstants, contact: ContactParams) -> Self {
        Self {
            weights,
            consts,
            contact,
            distance_mode: DistanceMode::Surface,
            include_hand: true,
        }
    }
}

/// Energy value with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub value: f64,
    pub breakdown: EnergyBreakdown,
    pub gradient: Vec<f64>,
    /// Terms that could not be evaluated (too few frames).
    pub skipped: Vec<Term>,
}

/// Energy value with diagnostics from the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub breakdown: EnergyBreakdown,
    pub skipped: Vec<Term>,
    /// For every sampled object vertex then every sampled hand vertex, frame
    /// by frame: whether its penetration hinge is active.
    pub penetration_active: Vec<bool>,
    /// Per batch frame: the sampled object vertices' contact states.
    pub states: Vec<Vec<VertexForceState>>,
    /// Per batch frame: learned net force.
    pub net_forces: Vec<Vec3>,
}

/// Fixed inputs of the energy: meshes, reference poses and options.
#[derive(Debug, Clone)]
pub struct Problem {
    object_mesh: Arc<TriMesh>,
    hand_model: Arc<SkinnedHandModel>,
    frames: usize,
    options: EvalOptions,
    reference_object: Vec<ObjectDoF>,
    reference_hand: Vec<Vec<Vec3>>,
    object_distance: MeshDistance,
    /// Network positions are relative to this point.
    origin: Vec3,
    template: ForceField,
}

struct ObjectSample {
    vertex: usize,
    position: Vec3,
    normal: Vec3,
    distance: SignedDistanceResult,
    probability: f64,
    probability_slope: f64,
}

struct HandSample {
    vertex: usize,
    position: Vec3,
    distance: f64,
    /// Distance gradient in the object's rest frame.
    local_gradient: Vec3,
}

struct FrameTape {
    frame: usize,
    rotation: RotationJacobian,
    translation: Vec3,
    hand: HandForward,
    /// Present for batch frames only.
    contact: Option<FrameContact>,
}

struct FrameContact {
    object: Vec<ObjectSample>,
    hand: Vec<HandSample>,
    hand_triangles_of_object: Vec<[usize; 3]>,
}

struct Geometry {
    tapes: Vec<FrameTape>,
    batch_slots: Vec<usize>,
    /// Network input, one column per (batch frame, object sample).
    input: DMatrix<f64>,
}

struct Assembled {
    states: Vec<Vec<VertexForceState>>,
    net_forces: Vec<Vec3>,
    parts: EnergyParts,
    skipped: Vec<Term>,
    physics_residual: Vec<Option<Vec3>>,
}

struct Forward {
    tapes: Vec<FrameTape>,
    /// Position of each batch frame in `tapes`.
    batch_slots: Vec<usize>,
    network: Vec<BatchTape>,
    outputs: DMatrix<f64>,
    states: Vec<Vec<VertexForceState>>,
    net_forces: Vec<Vec3>,
    parts: EnergyParts,
    skipped: Vec<Term>,
    physics_residual: Vec<Option<Vec3>>,
}

impl Problem {
    /// Reference poses for the deviation term are the scene's current poses.
    pub fn new(scene: &SceneTrajectory, options: EvalOptions, template: ForceField) -> Result<Self, DiffError> {
        scene.validate().map_err(|e| DiffError::Shape(e.to_string()))?;
        options
            .weights
            .validate()
            .map_err(|e| DiffError::Options(e.to_string()))?;
        options
            .consts
            .validate()
            .map_err(|e| DiffError::Options(e.to_string()))?;
        let object_distance = MeshDistance::with_mode(&scene.object_mesh, options.distance_mode)?;
        let reference_hand = scene
            .hand
            .par_iter()
            .map(|h| scene.hand_model.forward(h).vertices)
            .collect();
        let origin = scene.posed_object(0).centroid();
        Ok(Self {
            object_mesh: scene.object_mesh.clone(),
            hand_model: scene.hand_model.clone(),
            frames: scene.frames(),
            options,
            reference_object: scene.object.clone(),
            reference_hand,
            object_distance,
            origin,
            template,
        })
    }

    pub fn options(&self) -> &EvalOptions {
        &self.options
    }

    pub fn set_contact(&mut self, contact: ContactParams) {
        self.options.contact = contact;
    }

    pub fn set_weights(&mut self, weights: EnergyWeights) {
        self.options.weights = weights;
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn template(&self) -> &ForceField {
        &self.template
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    /// Network time input of frame `t`.
    pub fn normalized_time(&self, t: usize) -> f64 {
        if self.frames > 1 {
            t as f64 / (self.frames - 1) as f64
        } else {
            0.0
        }
    }

    pub fn evaluate(&self, params: &ParamVector, batch: &BatchSpec) -> Result<Evaluation, DiffError> {
        let fwd = self.forward(params, batch)?;
        let breakdown = self.finish(&fwd)?;
        let mut penetration_active = Vec::new();
        let d_pen = self.options.weights.allowed_penetration;
        for &slot in &fwd.batch_slots {
            let c = fwd.tapes[slot].contact.as_ref().unwrap();
            penetration_active.extend(c.object.iter().map(|s| penetration_hinge(s.distance.distance, d_pen) > 0.0));
            penetration_active.extend(c.hand.iter().map(|s| penetration_hinge(s.distance, d_pen) > 0.0));
        }
        Ok(Evaluation {
            breakdown,
            skipped: fwd.skipped,
            penetration_active,
            states: fwd.states,
            net_forces: fwd.net_forces,
        })
    }

    pub fn value(&self, params: &ParamVector, batch: &BatchSpec) -> Result<f64, DiffError> {
        Ok(self.evaluate(params, batch)?.breakdown.total)
    }

    fn finish(&self, fwd: &Forward) -> Result<EnergyBreakdown, DiffError> {
        let b = total_energy(fwd.parts, &self.options.weights);
        if let Some(term) = b.non_finite_term(&self.options.weights) {
            return Err(DiffError::NonFinite { term });
        }
        if !b.total.is_finite() {
            return Err(DiffError::NonFinite { term: Term::Physics });
        }
        Ok(b)
    }

    fn check(&self, params: &ParamVector, batch: &BatchSpec) -> Result<(), DiffError> {
        if params.frames() != self.frames {
            return Err(DiffError::Shape(format!(
                "parameters cover {} frames, scene has {}",
                params.frames(),
                self.frames
            )));
        }
        let expected = (OBJECT_DOF + HAND_DOF) * self.frames + self.template.param_count();
        if params.len() != expected {
            return Err(DiffError::Shape(format!("expected {expected} parameters, got {}", params.len())));
        }
        if batch.frames.is_empty() {
            return Err(DiffError::Batch("no frames".into()));
        }
        if batch.frames.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DiffError::Batch("frames must be strictly increasing".into()));
        }
        if *batch.frames.last().unwrap() >= self.frames {
            return Err(DiffError::Batch("frame out of range".into()));
        }
        if batch.object_vertices.is_empty() {
            return Err(DiffError::Batch("no sampled object vertices".into()));
        }
        if batch.object_vertices.iter().any(|&v| v >= self.object_mesh.vertex_count()) {
            return Err(DiffError::Batch("object vertex out of range".into()));
        }
        if batch.hand_vertices.iter().any(|&v| v >= self.hand_model.vertex_count()) {
            return Err(DiffError::Batch("hand vertex out of range".into()));
        }
        Ok(())
    }

    fn geometry(&self, params: &ParamVector, batch: &BatchSpec) -> Result<Geometry, DiffError> {
        self.check(params, batch)?;
        let opts = &self.options;
        let in_batch: BTreeSet<usize> = batch.frames.iter().copied().collect();
        let mut support: BTreeSet<usize> = in_batch.clone();
        for &t in &batch.frames {
            if t >= 2 {
                support.insert(t - 1);
                support.insert(t - 2);
            }
        }
        let support: Vec<usize> = support.into_iter().collect();

        let rest_vertices = self.object_mesh.vertices();
        let rest_normals = self.object_mesh.normals();
        let tapes: Vec<FrameTape> = support
            .par_iter()
            .map(|&t| -> Result<FrameTape, DiffError> {
                let od = params.object(t);
                let rotation = RotationJacobian::new(&od.axis_angle);
                let translation = od.translation;
                let hand = self.hand_model.forward(&params.hand(t));
                let contact = if in_batch.contains(&t) {
                    let triangles = self.hand_model.rest_mesh().triangles();
                    let hand_normals = match opts.distance_mode {
                        DistanceMode::Surface => Vec::new(),
                        DistanceMode::Vertices => compute_vertex_normals(&hand.vertices, triangles)?,
                    };
                    let hand_distance = MeshDistance::from_parts(&hand.vertices, triangles, &hand_normals, opts.distance_mode)?;
                    let r = rotation.matrix;
                    let object: Vec<ObjectSample> = batch
                        .object_vertices
                        .iter()
                        .map(|&i| {
                            let position = r * rest_vertices[i] + translation;
                            let distance = hand_distance.query(&position);
                            let (probability, probability_slope) =
                                contact_probability_with_derivative(distance.distance, &opts.contact);
                            ObjectSample {
                                vertex: i,
                                position,
                                normal: r * rest_normals[i],
                                distance,
                                probability,
                                probability_slope,
                            }
                        })
                        .collect();
                    let hand_triangles_of_object = object
                        .iter()
                        .map(|s| triangles[s.distance.closest_triangle])
                        .collect();
                    let hand_samples = if opts.include_hand {
                        let rt = r.transpose();
                        batch
                            .hand_vertices
                            .iter()
                            .map(|&j| {
                                let position = hand.vertices[j];
                                let q = self.object_distance.query(&(rt * (position - translation)));
                                HandSample {
                                    vertex: j,
                                    position,
                                    distance: q.distance,
                                    local_gradient: q.gradient,
                                }
                            })
                            .collect()
                    } else {
                        Vec::new()
                    };
                    Some(FrameContact {
                        object,
                        hand: hand_samples,
                        hand_triangles_of_object,
                    })
                } else {
                    None
                };
                Ok(FrameTape {
                    frame: t,
                    rotation,
                    translation,
                    hand,
                    contact,
                })
            })
            .collect::<Result<_, _>>()?;
        let slot_of = |t: usize| support.binary_search(&t).unwrap();
        let batch_slots: Vec<usize> = batch.frames.iter().map(|&t| slot_of(t)).collect();

        // Network over all (frame, vertex) pairs, frame-major.
        let nv = batch.object_vertices.len();
        let cols = nv * batch_slots.len();
        let mut input = DMatrix::zeros(INPUT_DIM, cols);
        for (b, &slot) in batch_slots.iter().enumerate() {
            let tape = &tapes[slot];
            let time = self.normalized_time(tape.frame);
            for (k, s) in tape.contact.as_ref().unwrap().object.iter().enumerate() {
                let c = b * nv + k;
                let p = s.position - self.origin;
                input[(0, c)] = p.x;
                input[(1, c)] = p.y;
                input[(2, c)] = p.z;
                input[(3, c)] = time;
            }
        }
        Ok(Geometry {
            tapes,
            batch_slots,
            input,
        })
    }

    fn forward(&self, params: &ParamVector, batch: &BatchSpec) -> Result<Forward, DiffError> {
        let geometry = self.geometry(params, batch)?;
        let field = params.field(&self.template)?;
        let network = field.forward_chunks(&geometry.input);
        let outputs = ForceField::chunk_outputs(&network);
        let assembled = self.assemble(params, &geometry.tapes, &geometry.batch_slots, &outputs);
        Ok(Forward {
            tapes: geometry.tapes,
            batch_slots: geometry.batch_slots,
            network,
            outputs,
            states: assembled.states,
            net_forces: assembled.net_forces,
            parts: assembled.parts,
            skipped: assembled.skipped,
            physics_residual: assembled.physics_residual,
        })
    }

    /// Force, penetration, deviation and dynamics terms from the posed
    /// geometry and the network outputs.
    fn assemble(&self, params: &ParamVector, tapes: &[FrameTape], batch_slots: &[usize], outputs: &DMatrix<f64>) -> Assembled {
        let opts = &self.options;
        let nv = outputs.ncols() / batch_slots.len();
        let slot_of = |t: usize| tapes.binary_search_by_key(&t, |tp| tp.frame).unwrap();
        let consts = &opts.consts;
        let mut parts = EnergyParts::default();
        let mut states = Vec::with_capacity(batch_slots.len());
        let mut net_forces = Vec::with_capacity(batch_slots.len());
        let d_pen = opts.weights.allowed_penetration;
        for (b, &slot) in batch_slots.iter().enumerate() {
            let c = tapes[slot].contact.as_ref().unwrap();
            let mut frame_states = Vec::with_capacity(nv);
            let mut sum = Vec3::zeros();
            for (k, s) in c.object.iter().enumerate() {
                let col = b * nv + k;
                let act = outputs[(0, col)];
                let par = Vec3::new(outputs[(1, col)], outputs[(2, col)], outputs[(3, col)]);
                let (fn_, fs) = vertex_forces(s.probability, act, &par, &s.normal, consts);
                sum += fn_ + fs;
                parts.force_reg += fn_.norm_squared() + fs.norm_squared();
                parts.penetration += penetration_hinge(s.distance.distance, d_pen);
                let reference = self.reference_object_vertex(tapes[slot].frame, s.vertex);
                parts.deviation += (s.position - reference).norm_squared();
                frame_states.push(VertexForceState {
                    distance: s.distance.distance,
                    probability: s.probability,
                    normal_force: fn_,
                    friction_force: fs,
                });
            }
            for h in &c.hand {
                parts.penetration += penetration_hinge(h.distance, d_pen);
                let reference = self.reference_hand[tapes[slot].frame][h.vertex];
                parts.deviation += (h.position - reference).norm_squared();
            }
            net_forces.push(consts.weight() + sum / nv as f64);
            states.push(frame_states);
        }

        let mut skipped = Vec::new();
        let mut physics_residual = vec![None; batch_slots.len()];
        if self.frames < 3 {
            skipped.push(Term::Physics);
            skipped.push(Term::Smooth);
        } else {
            let dt2 = consts.frame_dt * consts.frame_dt;
            for (b, &slot) in batch_slots.iter().enumerate() {
                let t = tapes[slot].frame;
                if t < 2 {
                    continue;
                }
                let (x0, x1, x2) = (
                    tapes[slot].translation,
                    tapes[slot_of(t - 1)].translation,
                    tapes[slot_of(t - 2)].translation,
                );
                let acc = second_difference(&x0, &x1, &x2);
                let fd = acc * (consts.mass / dt2);
                let r = fd - net_forces[b];
                parts.physics += r.norm_squared();
                physics_residual[b] = Some(r);
                parts.smooth += acc.norm_squared();
                if opts.include_hand {
                    let (h0, h1, h2) = (&tapes[slot].hand, &tapes[slot_of(t - 1)].hand, &tapes[slot_of(t - 2)].hand);
                    let root = second_difference(
                        &params.hand(t).translation,
                        &params.hand(t - 1).translation,
                        &params.hand(t - 2).translation,
                    );
                    parts.smooth += root.norm_squared();
                    for j in 0..REPORTED_JOINTS {
                        parts.smooth += second_difference(&h0.joints[j], &h1.joints[j], &h2.joints[j]).norm_squared();
                    }
                }
            }
        }

        Assembled {
            states,
            net_forces,
            parts,
            skipped,
            physics_residual,
        }
    }

    fn reference_object_vertex(&self, t: usize, i: usize) -> Vec3 {
        let o = &self.reference_object[t];
        crate::kinematics::axis_angle_to_matrix(&o.axis_angle) * self.object_mesh.vertices()[i] + o.translation
    }

    pub fn evaluate_with_gradient(&self, params: &ParamVector, batch: &BatchSpec) -> Result<GradientReport, DiffError> {
        let fwd = self.forward(params, batch)?;
        let breakdown = self.finish(&fwd)?;
        let opts = &self.options;
        let w = &opts.weights;
        let consts = &opts.consts;
        let nv = batch.object_vertices.len();
        let nt = fwd.tapes.len();
        let slot_of = |t: usize| fwd.tapes.binary_search_by_key(&t, |tp| tp.frame).unwrap();

        // Cross-frame adjoints: translations, hand root translations, joints
        // and per-frame net force.
        let mut x_bar = vec![Vec3::zeros(); nt];
        let mut hand_t_bar = vec![Vec3::zeros(); nt];
        let mut joint_bar = vec![vec![Vec3::zeros(); REPORTED_JOINTS]; nt];
        let mut net_bar = vec![Vec3::zeros(); fwd.batch_slots.len()];
        let dt2 = consts.frame_dt * consts.frame_dt;
        for (b, &slot) in fwd.batch_slots.iter().enumerate() {
            let t = fwd.tapes[slot].frame;
            let Some(r) = fwd.physics_residual[b] else { continue };
            let (s1, s2) = (slot_of(t - 1), slot_of(t - 2));
            // d/d(fd) of w |fd - net|^2 is 2 w r.
            let g = r * (2.0 * w.physics);
            net_bar[b] -= g;
            let gx = g * (consts.mass / dt2);
            let acc = second_difference(&fwd.tapes[slot].translation, &fwd.tapes[s1].translation, &fwd.tapes[s2].translation);
            let gx = gx + acc * (2.0 * w.smooth);
            x_bar[slot] += gx;
            x_bar[s1] -= gx * 2.0;
            x_bar[s2] += gx;
            if opts.include_hand {
                let root = second_difference(
                    &params.hand(t).translation,
                    &params.hand(t - 1).translation,
                    &params.hand(t - 2).translation,
                ) * (2.0 * w.smooth);
                hand_t_bar[slot] += root;
                hand_t_bar[s1] -= root * 2.0;
                hand_t_bar[s2] += root;
                for j in 0..REPORTED_JOINTS {
                    let a = second_difference(
                        &fwd.tapes[slot].hand.joints[j],
                        &fwd.tapes[s1].hand.joints[j],
                        &fwd.tapes[s2].hand.joints[j],
                    ) * (2.0 * w.smooth);
                    joint_bar[slot][j] += a;
                    joint_bar[s1][j] -= a * 2.0;
                    joint_bar[s2][j] += a;
                }
            }
        }

        // Per-vertex force adjoints and the network output adjoint.
        struct VertexAdjoint {
            distance: f64,
            normal: Vec3,
        }
        let per_frame: Vec<(Vec<VertexAdjoint>, Vec<[f64; 4]>)> = fwd
            .batch_slots
            .par_iter()
            .enumerate()
            .map(|(b, &slot)| {
                let c = fwd.tapes[slot].contact.as_ref().unwrap();
                let mut adj = Vec::with_capacity(nv);
                let mut out = Vec::with_capacity(nv);
                for (k, s) in c.object.iter().enumerate() {
                    let col = b * nv + k;
                    let act = fwd.outputs[(0, col)];
                    let par = Vec3::new(fwd.outputs[(1, col)], fwd.outputs[(2, col)], fwd.outputs[(3, col)]);
                    let st = &fwd.states[b][k];
                    let shared = net_bar[b] / nv as f64;
                    let fn_bar = shared + st.normal_force * (2.0 * w.force_reg);
                    let fs_bar = shared + st.friction_force * (2.0 * w.force_reg);
                    let va = vertex_forces_backward(s.probability, act, &par, &s.normal, consts, &fn_bar, &fs_bar);
                    let mut d_bar = va.probability * s.probability_slope;
                    if penetration_hinge(s.distance.distance, w.allowed_penetration) > 0.0 {
                        d_bar -= w.penetration;
                    }
                    adj.push(VertexAdjoint {
                        distance: d_bar,
                        normal: va.normal,
                    });
                    out.push([va.activation, va.parameter.x, va.parameter.y, va.parameter.z]);
                }
                (adj, out)
            })
            .collect();
        let cols = fwd.outputs.ncols();
        let mut out_adj = DMatrix::zeros(4, cols);
        for (b, (_, out)) in per_frame.iter().enumerate() {
            for (k, o) in out.iter().enumerate() {
                for r in 0..4 {
                    out_adj[(r, b * nv + k)] = o[r];
                }
            }
        }
        let field = params.field(&self.template)?;
        let (field_grad, input_adj) = field.backward_chunks(&fwd.network, &out_adj);

        // Per-frame pose gradients.
        let batch_index: Vec<Option<usize>> = {
            let mut v = vec![None; nt];
            for (b, &slot) in fwd.batch_slots.iter().enumerate() {
                v[slot] = Some(b);
            }
            v
        };
        let rest_vertices = self.object_mesh.vertices();
        let rest_normals = self.object_mesh.normals();
        let frame_grads: Vec<([f64; OBJECT_DOF], [f64; HAND_DOF])> = (0..nt)
            .into_par_iter()
            .map(|slot| {
                let tape = &fwd.tapes[slot];
                let mut r_bar = Matrix3::zeros();
                let mut xb = x_bar[slot];
                let mut hand_vbar: Vec<Vec3> = Vec::new();
                if let Some(b) = batch_index[slot] {
                    let c = tape.contact.as_ref().unwrap();
                    let (adj, _) = &per_frame[b];
                    hand_vbar = vec![Vec3::zeros(); self.hand_model.vertex_count()];
                    for (k, s) in c.object.iter().enumerate() {
                        let col = b * nv + k;
                        let d_bar = adj[k].distance;
                        let mut v_bar = Vec3::new(input_adj[(0, col)], input_adj[(1, col)], input_adj[(2, col)]);
                        v_bar += s.distance.gradient * d_bar;
                        let reference = self.reference_object_vertex(tape.frame, s.vertex);
                        v_bar += (s.position - reference) * (2.0 * w.deviation);
                        if d_bar != 0.0 {
                            let tri = c.hand_triangles_of_object[k];
                            for (corner, &bk) in tri.iter().zip(&s.distance.barycentric) {
                                if bk != 0.0 {
                                    hand_vbar[*corner] -= s.distance.gradient * (d_bar * bk);
                                }
                            }
                        }
                        r_bar += v_bar * rest_vertices[s.vertex].transpose();
                        r_bar += adj[k].normal * rest_normals[s.vertex].transpose();
                        xb += v_bar;
                    }
                    let r = tape.rotation.matrix;
                    for h in &c.hand {
                        let mut q_bar = (h.position - self.reference_hand[tape.frame][h.vertex]) * (2.0 * w.deviation);
                        if penetration_hinge(h.distance, w.allowed_penetration) > 0.0 {
                            let d_bar = -w.penetration;
                            let g_world = r * h.local_gradient;
                            q_bar += g_world * d_bar;
                            xb -= g_world * d_bar;
                            r_bar += (h.position - tape.translation) * (h.local_gradient.transpose() * d_bar);
                        }
                        hand_vbar[h.vertex] += q_bar;
                    }
                }
                let aa_bar = tape.rotation.pullback(&r_bar);
                let mut og = [0.0; OBJECT_DOF];
                og[..3].copy_from_slice(aa_bar.as_slice());
                og[3..].copy_from_slice(xb.as_slice());
                let needs_hand = !hand_vbar.is_empty()
                    || joint_bar[slot].iter().any(|j| *j != Vec3::zeros())
                    || hand_t_bar[slot] != Vec3::zeros();
                let mut hg = [0.0; HAND_DOF];
                if needs_hand {
                    hg = self.hand_model.backward(&tape.hand, &hand_vbar, &joint_bar[slot]);
                    for k in 0..3 {
                        hg[3 + k] += hand_t_bar[slot][k];
                    }
                }
                (og, hg)
            })
            .collect();

        let mut gradient = vec![0.0; params.len()];
        for (slot, (og, hg)) in frame_grads.iter().enumerate() {
            let t = fwd.tapes[slot].frame;
            let o = params.object_offset(t);
            gradient[o..o + OBJECT_DOF].copy_from_slice(og);
            let h = params.hand_offset(t);
            gradient[h..h + HAND_DOF].copy_from_slice(hg);
        }
        let f = params.field_offset();
        gradient[f..].copy_from_slice(&field_grad);

        Ok(GradientReport {
            value: breakdown.total,
            breakdown,
            gradient,
            skipped: fwd.skipped,
        })
    }
}

/// Central differences `(f(x + h e_k) - f(x - h e_k)) / 2h` of any scalar
/// function.
pub fn central_differences<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let mut p = x.to_vec();
            p[k] = x[k] + h;
            let fp = f(&p);
            p[k] = x[k] - h;
            let fm = f(&p);
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central-difference gradient of the batch energy.
pub fn finite_difference_gradient(
    problem: &Problem,
    params: &ParamVector,
    batch: &BatchSpec,
    h: f64,
) -> Result<Vec<f64>, DiffError> {
    Ok(probe_all(problem, params, batch, h)?.into_iter().map(|p| p.derivative).collect())
}

/// Central difference along one coordinate, with whether the step crosses a
/// penetration hinge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateProbe {
    pub derivative: f64,
    pub crosses_kink: bool,
}

/// Each term is differenced on its own before weighting, so a large term
/// that does not depend on the coordinate adds no cancellation error.
fn termwise_difference(plus: &EnergyParts, minus: &EnergyParts, weights: &EnergyWeights, h: f64) -> f64 {
    Term::ALL
        .iter()
        .map(|&t| weights.get(t) * (plus.get(t) - minus.get(t)))
        .sum::<f64>()
        / (2.0 * h)
}

/// Difference of the force terms between two field perturbations, built
/// from per-vertex force differences instead of differencing the sums.
fn field_difference(plus: &Assembled, minus: &Assembled, weights: &EnergyWeights, h: f64) -> f64 {
    let mut reg = 0.0;
    let mut physics = 0.0;
    for b in 0..plus.states.len() {
        let mut delta_sum = Vec3::zeros();
        for (p, m) in plus.states[b].iter().zip(&minus.states[b]) {
            let dn = p.normal_force - m.normal_force;
            let ds = p.friction_force - m.friction_force;
            reg += dn.dot(&(p.normal_force + m.normal_force)) + ds.dot(&(p.friction_force + m.friction_force));
            delta_sum += dn + ds;
        }
        if let (Some(rp), Some(rm)) = (plus.physics_residual[b], minus.physics_residual[b]) {
            let delta_r = -delta_sum / plus.states[b].len() as f64;
            physics += delta_r.dot(&(rp + rm));
        }
    }
    (weights.get(Term::Physics) * physics + weights.get(Term::ForceReg) * reg) / (2.0 * h)
}

fn check_step(h: f64) -> Result<(), DiffError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(DiffError::Options(format!("step {h} must be positive")));
    }
    Ok(())
}

pub fn probe_coordinate(
    problem: &Problem,
    params: &ParamVector,
    batch: &BatchSpec,
    h: f64,
    k: usize,
) -> Result<CoordinateProbe, DiffError> {
    check_step(h)?;
    let mut p = params.clone();
    let x = params.as_slice()[k];
    p.as_mut_slice()[k] = x + h;
    let plus = problem.evaluate(&p, batch)?;
    p.as_mut_slice()[k] = x - h;
    let minus = problem.evaluate(&p, batch)?;
    Ok(CoordinateProbe {
        derivative: termwise_difference(&plus.breakdown.parts, &minus.breakdown.parts, &problem.options.weights, h),
        crosses_kink: plus.penetration_active != minus.penetration_active,
    })
}

/// Probes every coordinate. Field coordinates reuse the posed geometry and
/// only recompute the network rows a weight touches.
pub fn probe_all(
    problem: &Problem,
    params: &ParamVector,
    batch: &BatchSpec,
    h: f64,
) -> Result<Vec<CoordinateProbe>, DiffError> {
    check_step(h)?;
    let field_start = params.field_offset();
    let pose: Vec<CoordinateProbe> = (0..field_start)
        .into_par_iter()
        .map(|k| probe_coordinate(problem, params, batch, h, k))
        .collect::<Result<_, _>>()?;
    let geometry = problem.geometry(params, batch)?;
    let field = params.field(&problem.template)?;
    let network = field.forward_chunks(&geometry.input);
    let outputs = ForceField::chunk_outputs(&network);
    let weights = &problem.options.weights;
    let field_probes: Vec<CoordinateProbe> = (0..params.len() - field_start)
        .into_par_iter()
        .map(|k| {
            let parts = |delta: f64| {
                let mut shifted = outputs.clone();
                let mut col = 0;
                for tape in &network {
                    let out = field.perturbed_output(tape, k, delta);
                    shifted.columns_mut(col, out.ncols()).copy_from(&out);
                    col += out.ncols();
                }
                problem.assemble(params, &geometry.tapes, &geometry.batch_slots, &shifted)
            };
            CoordinateProbe {
                derivative: field_difference(&parts(h), &parts(-h), weights, h),
                crosses_kink: false,
            }
        })
        .collect();
    let mut all = pose;
    all.extend(field_probes);
    Ok(all)
}

/// Indices of the finger-pose coefficients of frame `t` in a [`ParamVector`].
pub fn finger_range(params: &ParamVector, t: usize) -> std::ops::Range<usize> {
    let o = params.hand_offset(t) + 6;
    o..o + FINGER_DOF
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_static_grasp, GraspConfig, GraspStyle, ObjectShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        problem: Problem,
        params: ParamVector,
        batch: BatchSpec,
    }

    /// Coarse box pinch over four frames with perturbed poses, evaluated on
    /// frames 2 and 3.
    fn fixture(weights: EnergyWeights, seed: u64) -> Fixture {
        let mut cfg = GraspConfig::new(ObjectShape::Box, GraspStyle::Pinch, 4, 3);
        cfg.object_spacing = 0.007;
        let synth = generate_static_grasp(&cfg).unwrap();
        let scene = synth.scene;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
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
        let field = ForceField::glorot(16, seed).unwrap();
        let options = EvalOptions::new(weights, PhysicsConstants::default(), ContactParams::new(0.01, 0.5).unwrap());
        let problem = Problem::new(&scene, options, field.clone()).unwrap();
        let params = ParamVector::new(&object, &hand, &field).unwrap();
        let batch = BatchSpec {
            frames: vec![2, 3],
            ..BatchSpec::full(&scene)
        };
        Fixture { problem, params, batch }
    }

    #[test]
    fn zero_weights_give_zero() {
        let f = fixture(EnergyWeights::zero(), 1);
        let r = f.problem.evaluate_with_gradient(&f.params, &f.batch).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.gradient.iter().all(|&g| g == 0.0));
        assert_eq!(r.gradient.len(), f.params.len());
    }

    #[test]
    fn deviation_minimum_at_reference() {
        let mut w = EnergyWeights::zero();
        w.deviation = 1e5;
        let f = fixture(w, 2);
        let scene_params = ParamVector::new(&f.problem.reference_object, &scene_hands(&f), f.problem.template()).unwrap();
        let r = f.problem.evaluate_with_gradient(&scene_params, &f.batch).unwrap();
        assert_eq!(r.value, 0.0);
        let norm = r.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(norm < 1e-10, "{norm}");
    }

    fn scene_hands(f: &Fixture) -> Vec<HandDoF> {
        // The fixture perturbs every frame; rebuild the unperturbed hands.
        let mut cfg = GraspConfig::new(ObjectShape::Box, GraspStyle::Pinch, 4, 3);
        cfg.object_spacing = 0.007;
        let hands = generate_static_grasp(&cfg).unwrap().scene.hand;
        assert_eq!(hands.len(), f.params.frames());
        hands
    }

    #[test]
    fn gradient_matches_differences_on_sampled_coordinates() {
        let f = fixture(EnergyWeights::default(), 3);
        let r = f.problem.evaluate_with_gradient(&f.params, &f.batch).unwrap();
        for term in Term::ALL {
            assert!(r.breakdown.parts.get(term) > 0.0, "{term} inactive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field0 = f.params.field_offset();
        let mut coords: Vec<usize> = (0..field0).collect();
        coords.extend((0..60).map(|_| rng.random_range(field0..f.params.len())));
        let h = 1e-6;
        let mut checked = 0;
        for k in coords {
            let probe = probe_coordinate(&f.problem, &f.params, &f.batch, h, k).unwrap();
            if probe.crosses_kink {
                continue;
            }
            checked += 1;
            let a = r.gradient[k];
            let floor = 4.0 * f64::EPSILON * r.value.abs() / h;
            let tol = 1e-4 * a.abs().max(probe.derivative.abs()) + floor;
            assert!((a - probe.derivative).abs() <= tol, "coordinate {k}: analytic {a} vs differences {}", probe.derivative);
        }
        assert!(checked > 150);
    }

    #[test]
    fn bit_identical_reruns() {
        let f = fixture(EnergyWeights::default(), 4);
        let a = f.problem.evaluate_with_gradient(&f.params, &f.batch).unwrap();
        let b = f.problem.evaluate_with_gradient(&f.params, &f.batch).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert!(a.gradient.iter().zip(&b.gradient).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn field_has_no_gradient_without_force_terms() {
        let mut w = EnergyWeights::default();
        w.physics = 0.0;
        w.force_reg = 0.0;
        let f = fixture(w, 5);
        let r = f.problem.evaluate_with_gradient(&f.params, &f.batch).unwrap();
        assert!(r.gradient[f.params.field_offset()..].iter().all(|&g| g == 0.0));
        assert!(r.gradient[..f.params.field_offset()].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn excluding_the_hand_drops_its_samples() {
        let mut f = fixture(EnergyWeights::default(), 6);
        f.problem.options.include_hand = false;
        let full = f.problem.value(&f.params, &f.batch).unwrap();
        let mut fewer = f.batch.clone();
        fewer.hand_vertices.truncate(10);
        assert_eq!(full, f.problem.value(&f.params, &fewer).unwrap());
        f.problem.options.include_hand = true;
        assert_ne!(full, f.problem.value(&f.params, &f.batch).unwrap());
    }

    #[test]
    fn single_frame_skips_dynamic_terms() {
        let f = fixture(EnergyWeights::default(), 7);
        let batch = BatchSpec {
            frames: vec![1],
            ..f.batch.clone()
        };
        let e = f.problem.evaluate(&f.params, &batch).unwrap();
        assert_eq!(e.breakdown.parts.physics, 0.0);
        assert_eq!(e.breakdown.parts.smooth, 0.0);
    }

    #[test]
    fn rejects_bad_batches() {
        let f = fixture(EnergyWeights::default(), 8);
        let mut b = f.batch.clone();
        b.frames = vec![3, 2];
        assert!(matches!(f.problem.evaluate(&f.params, &b), Err(DiffError::Batch(_))));
        b.frames = vec![4];
        assert!(matches!(f.problem.evaluate(&f.params, &b), Err(DiffError::Batch(_))));
        let short = ParamVector::from_raw(4, vec![0.0; 10]);
        assert!(matches!(f.problem.evaluate(&short, &f.batch), Err(DiffError::Shape(_))));
    }

    #[test]
    fn non_finite_energy_names_the_term() {
        let f = fixture(EnergyWeights::default(), 10);
        let mut p = f.params.clone();
        let o = p.field_offset();
        p.as_mut_slice()[o] = f64::NAN;
        let err = f.problem.evaluate(&p, &f.batch).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn quadratic_differences() {
        let x = [0.3, -1.2, 2.0];
        let g = central_differences(|p| p.iter().map(|v| v * v).sum(), &x, 1e-4);
        for (gi, xi) in g.iter().zip(&x) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn halving_the_step_quarters_the_error() {
        let f = |p: &[f64]| (p[0]).sin() * (2.0 * p[1]).exp();
        let x = [0.7, 0.2];
        let exact = [0.7f64.cos() * 0.4f64.exp(), 2.0 * 0.7f64.sin() * 0.4f64.exp()];
        let err = |h: f64| {
            let g = central_differences(f, &x, h);
            ((g[0] - exact[0]).powi(2) + (g[1] - exact[1]).powi(2)).sqrt()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn param_vector_layout() {
        let f = fixture(EnergyWeights::zero(), 11);
        let p = &f.params;
        assert_eq!(p.len(), 4 * 27 + f.problem.template().param_count());
        assert_eq!(p.hand_offset(0), 24);
        assert_eq!(p.field_offset(), 108);
        assert_eq!(finger_range(p, 1), 24 + 21 + 6..24 + 21 + 21);
    }
}
