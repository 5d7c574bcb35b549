//! Soft contact model: a sigmoid of signed distance with an annealed width.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ContactError {
    #[error("contact width must be positive, got {0}")]
    NonPositiveWidth(f64),
    #[error("zero-distance probability must lie in (0, 1), got {0}")]
    ProbabilityOutOfRange(f64),
    #[error("invalid anneal schedule: {0}")]
    InvalidSchedule(String),
    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },
}

/// Width `z` (meters) and zero-distance probability `p0` of the contact curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactParams {
    z: f64,
    p0: f64,
}

impl ContactParams {
    pub fn new(z: f64, p0: f64) -> Result<Self, ContactError> {
        if !(z > 0.0 && z.is_finite()) {
            return Err(ContactError::NonPositiveWidth(z));
        }
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(ContactError::ProbabilityOutOfRange(p0));
        }
        Ok(Self { z, p0 })
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }

    pub fn with_z(&self, z: f64) -> Result<Self, ContactError> {
        Self::new(z, self.p0)
    }

}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Contact probability at signed distance `d` (negative inside).
///
/// Evaluated as `p0 / (p0 + (1 - p0) exp(6 d / z))`, the same sigmoid written
/// so that the denominator rounds to exactly 1 at `d = 0`.
pub fn contact_probability(d: f64, params: &ContactParams) -> f64 {
    let p0 = params.p0;
    p0 / (p0 + (1.0 - p0) * (6.0 * d / params.z).exp())
}

/// Probability and its derivative with respect to `d`.
pub fn contact_probability_with_derivative(d: f64, params: &ContactParams) -> (f64, f64) {
    let p = contact_probability(d, params);
    (p, -(6.0 / params.z) * p * (1.0 - p))
}

/// Geometric decay of the contact width over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub z_start: f64,
    pub z_end: f64,
    pub epochs: usize,
}

impl AnnealSchedule {
    pub fn new(z_start: f64, z_end: f64, epochs: usize) -> Result<Self, ContactError> {
        let s = Self { z_start, z_end, epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ContactError> {
        if !(self.z_end > 0.0 && self.z_end.is_finite()) {
            return Err(ContactError::InvalidSchedule(format!("end width {} must be positive", self.z_end)));
        }
        if !(self.z_start >= self.z_end && self.z_start.is_finite()) {
            return Err(ContactError::InvalidSchedule(format!(
                "start width {} must be at least the end width {}",
                self.z_start, self.z_end
            )));
        }
        if self.epochs == 0 {
            return Err(ContactError::InvalidSchedule("at least one epoch is required".into()));
        }
        Ok(())
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            z_start: 0.030,
            z_end: 0.002,
            epochs: 300,
        }
    }
}

pub fn annealed_z(epoch: usize, schedule: &AnnealSchedule) -> Result<f64, ContactError> {
    schedule.validate()?;
    if epoch >= schedule.epochs {
        return Err(ContactError::EpochOutOfRange {
            epoch,
            epochs: schedule.epochs,
        });
    }
    if schedule.epochs == 1 {
        return Ok(schedule.z_end);
    }
    if epoch == schedule.epochs - 1 {
        return Ok(schedule.z_end);
    }
    let frac = epoch as f64 / (schedule.epochs - 1) as f64;
    Ok(schedule.z_start * (schedule.z_end / schedule.z_start).powf(frac))
}
