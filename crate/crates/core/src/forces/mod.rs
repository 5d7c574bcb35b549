//! Per-vertex contact forces, the learned force field and finite-difference
//! dynamics.

mod network;

use serde::{Deserialize, Serialize};

use crate::contact::sigmoid;
use crate::geometry::Vec3;

pub use network::{BatchTape, ForceField, DEFAULT_HIDDEN, DEPTH, INPUT_DIM, OUTPUT_DIM};

/// Below this tangential magnitude friction is treated as zero.
pub const FRICTION_EPS: f64 = 1e-12;

/// Normal force magnitudes (N) below this are treated as no contact. Below
/// it squared norms reach subnormal range and lose relative precision.
pub const MIN_FORCE: f64 = 1e-140;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForceError {
    #[error("invalid force network: {0}")]
    InvalidNetwork(String),
    #[error("invalid physical constant: {0}")]
    InvalidConstant(String),
    #[error("finite-difference dynamics need at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("at least one sampled vertex is required")]
    NoVertices,
}

/// Physical constants of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    /// Object mass in kilograms.
    pub mass: f64,
    pub gravity: Vec3,
    /// Largest normal force magnitude per vertex, in newtons.
    pub max_normal_force: f64,
    /// Static friction coefficient.
    pub friction: f64,
    /// Seconds between frames.
    pub frame_dt: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        Self {
            mass: 0.1,
            gravity: Vec3::new(0.0, -9.8, 0.0),
            max_normal_force: 5.0,
            friction: 0.8,
            frame_dt: 1.0 / 30.0,
        }
    }
}

impl PhysicsConstants {
    pub fn validate(&self) -> Result<(), ForceError> {
        let bad = |m: &str| Err(ForceError::InvalidConstant(m.to_string()));
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad("mass must be positive");
        }
        if !(self.max_normal_force > 0.0 && self.max_normal_force.is_finite()) {
            return bad("maximum normal force must be positive");
        }
        if !(self.friction >= 0.0 && self.friction.is_finite()) {
            return bad("friction coefficient must be non-negative");
        }
        if !(self.frame_dt > 0.0 && self.frame_dt.is_finite()) {
            return bad("frame interval must be positive");
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return bad("gravity must be finite");
        }
        Ok(())
    }

    pub fn weight(&self) -> Vec3 {
        self.gravity * self.mass
    }
}

/// Contact quantities of one object vertex in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VertexForceState {
    pub distance: f64,
    pub probability: f64,
    pub normal_force: Vec3,
    pub friction_force: Vec3,
}

/// `F_max * p * sigmoid(a)` along `-n`.
pub fn normal_force(probability: f64, activation: f64, normal: &Vec3, max_force: f64) -> Vec3 {
    let magnitude = max_force * probability * sigmoid(activation);
    if magnitude < MIN_FORCE {
        return Vec3::zeros();
    }
    -normal * magnitude
}

/// `tanh(r) / r` and `(d/dr (tanh(r) / r)) / r`.
fn tanh_ratio(r: f64) -> (f64, f64) {
    if r < 1e-2 {
        let r2 = r * r;
        let r4 = r2 * r2;
        let r6 = r4 * r2;
        (
            1.0 - r2 / 3.0 + 2.0 * r4 / 15.0 - 17.0 * r6 / 315.0,
            -2.0 / 3.0 + 8.0 * r2 / 15.0 - 102.0 * r4 / 315.0 + 496.0 * r6 / 2835.0,
        )
    } else {
        let th = r.tanh();
        let sech2 = 1.0 - th * th;
        (th / r, (r * sech2 - th) / (r * r * r))
    }
}

/// Static friction from the normal force and the raw tangential parameter:
/// the parameter is projected onto the plane orthogonal to the normal force,
/// then saturated with `tanh` below `mu * |f_n|`.
pub fn friction_force(normal_force: &Vec3, parameter: &Vec3, mu: f64) -> Vec3 {
    let magnitude = normal_force.norm();
    if magnitude < MIN_FORCE {
        return Vec3::zeros();
    }
    let axis = normal_force / magnitude;
    let tangential = parameter - axis * parameter.dot(&axis);
    let r = tangential.norm();
    if r < FRICTION_EPS {
        return Vec3::zeros();
    }
    tangential * (mu * magnitude * r.tanh() / r)
}

/// Both forces for a vertex with unit normal `normal`, written in terms of the
/// normal so that the friction projection stays defined when `p = 0`.
pub fn vertex_forces(
    probability: f64,
    activation: f64,
    parameter: &Vec3,
    normal: &Vec3,
    consts: &PhysicsConstants,
) -> (Vec3, Vec3) {
    let magnitude = consts.max_normal_force * probability * sigmoid(activation);
    if magnitude < MIN_FORCE {
        return (Vec3::zeros(), Vec3::zeros());
    }
    let fn_ = -normal * magnitude;
    let tangential = parameter - normal * parameter.dot(normal);
    let r = tangential.norm();
    if r < FRICTION_EPS {
        return (fn_, Vec3::zeros());
    }
    let (phi, _) = tanh_ratio(r);
    (fn_, tangential * (consts.friction * magnitude * phi))
}

/// Adjoints of [`vertex_forces`] inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VertexForceAdjoint {
    pub probability: f64,
    pub activation: f64,
    pub parameter: Vec3,
    pub normal: Vec3,
}

/// Reverse pass of [`vertex_forces`] given adjoints of the normal and
/// friction forces.
pub fn vertex_forces_backward(
    probability: f64,
    activation: f64,
    parameter: &Vec3,
    normal: &Vec3,
    consts: &PhysicsConstants,
    normal_bar: &Vec3,
    friction_bar: &Vec3,
) -> VertexForceAdjoint {
    let sig = sigmoid(activation);
    let fmax = consts.max_normal_force;
    let magnitude = fmax * probability * sig;
    if magnitude < MIN_FORCE {
        return VertexForceAdjoint::default();
    }
    let mut m_bar = -normal_bar.dot(normal);
    let mut n_bar = -normal_bar * magnitude;
    let mut s_bar = Vec3::zeros();

    let sn = parameter.dot(normal);
    let tangential = parameter - normal * sn;
    let r = tangential.norm();
    if r >= FRICTION_EPS {
        let (phi, psi) = tanh_ratio(r);
        let mu = consts.friction;
        m_bar += mu * phi * friction_bar.dot(&tangential);
        let t_bar = (friction_bar * phi + tangential * (psi * friction_bar.dot(&tangential))) * (mu * magnitude);
        let tn = t_bar.dot(normal);
        s_bar += t_bar - normal * tn;
        n_bar -= t_bar * sn + parameter * tn;
    }

    VertexForceAdjoint {
        probability: m_bar * fmax * sig,
        activation: m_bar * fmax * probability * sig * (1.0 - sig),
        parameter: s_bar,
        normal: n_bar,
    }
}

/// `m g + (1 / N_v) * sum(f_n + f_s)`.
pub fn net_force(states: &[VertexForceState], consts: &PhysicsConstants, sample_count: usize) -> Result<Vec3, ForceError> {
    if sample_count == 0 {
        return Err(ForceError::NoVertices);
    }
    let sum: Vec3 = states.iter().map(|s| s.normal_force + s.friction_force).sum();
    Ok(consts.weight() + sum / sample_count as f64)
}

/// Finite-difference velocity, acceleration and implied net force of a
/// translation trajectory. Entries without enough history are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferences {
    pub velocity: Vec<Option<Vec3>>,
    pub acceleration: Vec<Option<Vec3>>,
    pub net_force: Vec<Option<Vec3>>,
}

/// Second difference `x[t] - 2 x[t-1] + x[t-2]` (per frame squared).
pub fn second_difference(a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    a - b * 2.0 + c
}

pub fn finite_difference_dynamics(translations: &[Vec3], consts: &PhysicsConstants) -> Result<FiniteDifferences, ForceError> {
    let n = translations.len();
    if n < 3 {
        return Err(ForceError::TooFewFrames(n));
    }
    let dt = consts.frame_dt;
    let velocity = (0..n)
        .map(|t| (t >= 1).then(|| (translations[t] - translations[t - 1]) / dt))
        .collect();
    let acceleration: Vec<Option<Vec3>> = (0..n)
        .map(|t| (t >= 2).then(|| second_difference(&translations[t], &translations[t - 1], &translations[t - 2]) / (dt * dt)))
        .collect();
    let net_force = acceleration.iter().map(|a| a.map(|a| a * consts.mass)).collect();
    Ok(FiniteDifferences {
        velocity,
        acceleration,
        net_force,
    })
}
