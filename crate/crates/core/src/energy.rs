//! The five energy terms and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::forces::{second_difference, VertexForceState};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnergyError {
    #[error("{term}: length mismatch ({left} vs {right})")]
    LengthMismatch { term: Term, left: usize, right: usize },
    #[error("invalid energy weights: {0}")]
    InvalidWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Physics,
    ForceReg,
    Penetration,
    Deviation,
    Smooth,
}

impl Term {
    pub const ALL: [Term; 5] = [
        Term::Physics,
        Term::ForceReg,
        Term::Penetration,
        Term::Deviation,
        Term::Smooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Physics => "physics",
            Term::ForceReg => "force_reg",
            Term::Penetration => "penetration",
            Term::Deviation => "deviation",
            Term::Smooth => "smooth",
        }
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyWeights {
    pub physics: f64,
    pub force_reg: f64,
    pub penetration: f64,
    pub deviation: f64,
    pub smooth: f64,
    /// Penetration allowed before the penalty starts, in meters.
    pub allowed_penetration: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        Self {
            physics: 5e2,
            force_reg: 3e-1,
            penetration: 5e7,
            deviation: 2e6,
            smooth: 1e5,
            allowed_penetration: 0.002,
        }
    }
}

impl EnergyWeights {
    pub fn zero() -> Self {
        Self {
            physics: 0.0,
            force_reg: 0.0,
            penetration: 0.0,
            deviation: 0.0,
            smooth: 0.0,
            allowed_penetration: 0.002,
        }
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Physics => self.physics,
            Term::ForceReg => self.force_reg,
            Term::Penetration => self.penetration,
            Term::Deviation => self.deviation,
            Term::Smooth => self.smooth,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        match term {
            Term::Physics => self.physics = value,
            Term::ForceReg => self.force_reg = value,
            Term::Penetration => self.penetration = value,
            Term::Deviation => self.deviation = value,
            Term::Smooth => self.smooth = value,
        }
    }

    pub fn validate(&self) -> Result<(), EnergyError> {
        for term in Term::ALL {
            let w = self.get(term);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(EnergyError::InvalidWeights(format!("{term} weight {w}")));
            }
        }
        if !(self.allowed_penetration >= 0.0 && self.allowed_penetration.is_finite()) {
            return Err(EnergyError::InvalidWeights(format!(
                "allowed penetration {}",
                self.allowed_penetration
            )));
        }
        Ok(())
    }
}

/// Unweighted term values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyParts {
    pub physics: f64,
    pub force_reg: f64,
    pub penetration: f64,
    pub deviation: f64,
    pub smooth: f64,
}

impl EnergyParts {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Physics => self.physics,
            Term::ForceReg => self.force_reg,
            Term::Penetration => self.penetration,
            Term::Deviation => self.deviation,
            Term::Smooth => self.smooth,
        }
    }

    pub fn add(&mut self, other: &EnergyParts) {
        self.physics += other.physics;
        self.force_reg += other.force_reg;
        self.penetration += other.penetration;
        self.deviation += other.deviation;
        self.smooth += other.smooth;
    }
}

/// Unweighted parts plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub parts: EnergyParts,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn weighted(&self, term: Term, weights: &EnergyWeights) -> f64 {
        weights.get(term) * self.parts.get(term)
    }

    /// First term whose weighted value is not finite.
    pub fn non_finite_term(&self, weights: &EnergyWeights) -> Option<Term> {
        Term::ALL.into_iter().find(|&t| !self.weighted(t, weights).is_finite())
    }
}

pub fn total_energy(parts: EnergyParts, weights: &EnergyWeights) -> EnergyBreakdown {
    let total = Term::ALL.iter().map(|&t| weights.get(t) * parts.get(t)).sum();
    EnergyBreakdown { parts, total }
}

/// Squared mismatch between learned and observed net force, summed over
/// frames.
pub fn e_physics(learned: &[Vec3], observed: &[Vec3]) -> Result<f64, EnergyError> {
    if learned.len() != observed.len() {
        return Err(EnergyError::LengthMismatch {
            term: Term::Physics,
            left: learned.len(),
            right: observed.len(),
        });
    }
    Ok(learned.iter().zip(observed).map(|(a, b)| (a - b).norm_squared()).sum())
}

pub fn e_force_reg(states: &[VertexForceState]) -> f64 {
    states
        .iter()
        .map(|s| s.normal_force.norm_squared() + s.friction_force.norm_squared())
        .sum()
}

/// Hinge on penetration deeper than `allowed`, for object and hand distances.
pub fn e_penetration(object_distances: &[f64], hand_distances: &[f64], allowed: f64) -> f64 {
    object_distances
        .iter()
        .chain(hand_distances)
        .map(|&d| penetration_hinge(d, allowed))
        .sum()
}

pub fn penetration_hinge(d: f64, allowed: f64) -> f64 {
    (-(d + allowed)).max(0.0)
}

pub fn e_deviation(current: &[Vec3], initial: &[Vec3]) -> Result<f64, EnergyError> {
    if current.len() != initial.len() {
        return Err(EnergyError::LengthMismatch {
            term: Term::Deviation,
            left: current.len(),
            right: initial.len(),
        });
    }
    Ok(current.iter().zip(initial).map(|(a, b)| (a - b).norm_squared()).sum())
}

/// Sum of squared per-frame second differences over every trajectory.
/// Trajectories shorter than three frames contribute nothing; the second
/// value reports whether any trajectory was long enough.
pub fn e_smooth(trajectories: &[&[Vec3]]) -> (f64, bool) {
    let mut total = 0.0;
    let mut applicable = false;
    for traj in trajectories {
        if traj.len() < 3 {
            continue;
        }
        applicable = true;
        total += traj
            .windows(3)
            .map(|w| second_difference(&w[2], &w[1], &w[0]).norm_squared())
            .sum::<f64>();
    }
    (total, applicable)
}
