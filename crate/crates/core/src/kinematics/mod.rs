//! Degrees of freedom and posing for the rigid object and the skinned hand.

mod hand;
mod rotation;
mod skinfile;
pub mod surrogate;

use serde::{Deserialize, Serialize};

use crate::geometry::{TriMesh, Vec3};

pub use hand::{pose_hand, HandForward, Joint, SkinnedHandModel};
pub use rotation::{axis_angle_to_matrix, canonical_axis_angle, skew, RotationJacobian};
pub use skinfile::{parse_skin_model, read_skin_model, to_skin_model_text, write_skin_model};

pub const OBJECT_DOF: usize = 6;
pub const HAND_DOF: usize = 21;
pub const FINGER_DOF: usize = 15;
/// Joints reported by the hand model (16 articulated + 5 fingertips).
pub const REPORTED_JOINTS: usize = 21;

#[derive(Debug, thiserror::Error)]
pub enum KinematicsError {
    #[error("invalid skinning model: {0}")]
    InvalidModel(String),
    #[error("skinning model file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("{0}")]
    Io(String),
}

/// Rigid pose of the object for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectDoF {
    pub axis_angle: Vec3,
    pub translation: Vec3,
}

impl ObjectDoF {
    pub fn from_translation(t: Vec3) -> Self {
        Self {
            axis_angle: Vec3::zeros(),
            translation: t,
        }
    }

    pub fn to_array(&self) -> [f64; OBJECT_DOF] {
        let (a, t) = (self.axis_angle, self.translation);
        [a.x, a.y, a.z, t.x, t.y, t.z]
    }

    pub fn from_array(v: &[f64; OBJECT_DOF]) -> Self {
        Self {
            axis_angle: Vec3::new(v[0], v[1], v[2]),
            translation: Vec3::new(v[3], v[4], v[5]),
        }
    }

    /// Same pose with the rotation angle wrapped into `[0, pi]`.
    pub fn normalized(&self) -> Self {
        Self {
            axis_angle: canonical_axis_angle(&self.axis_angle),
            translation: self.translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Hand pose for one frame: global rigid transform plus 15 articulation
/// coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HandDoF {
    pub axis_angle: Vec3,
    pub translation: Vec3,
    pub pose: [f64; FINGER_DOF],
}

impl HandDoF {
    pub fn to_array(&self) -> [f64; HAND_DOF] {
        let mut out = [0.0; HAND_DOF];
        out[..3].copy_from_slice(self.axis_angle.as_slice());
        out[3..6].copy_from_slice(self.translation.as_slice());
        out[6..].copy_from_slice(&self.pose);
        out
    }

    pub fn from_array(v: &[f64; HAND_DOF]) -> Self {
        let mut pose = [0.0; FINGER_DOF];
        pose.copy_from_slice(&v[6..]);
        Self {
            axis_angle: Vec3::new(v[0], v[1], v[2]),
            translation: Vec3::new(v[3], v[4], v[5]),
            pose,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Applies the rigid transform `v -> R v + t` to the rest mesh.
pub fn pose_object(dof: &ObjectDoF, rest: &TriMesh) -> TriMesh {
    rest.transformed(&axis_angle_to_matrix(&dof.axis_angle), &dof.translation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pose_keeps_mesh() {
        let m = crate::geometry::primitives::icosphere(0.03, 1);
        assert_eq!(pose_object(&ObjectDoF::default(), &m), m);
    }

    #[test]
    fn translation_shifts_vertices() {
        let m = crate::geometry::primitives::icosphere(0.03, 1);
        let p = pose_object(&ObjectDoF::from_translation(Vec3::new(0.0, 0.1, 0.0)), &m);
        for (a, b) in m.vertices().iter().zip(p.vertices()) {
            assert!((b - a - Vec3::new(0.0, 0.1, 0.0)).norm() < 1e-15);
        }
        assert_eq!(p.normals(), m.normals());
    }

    #[test]
    fn rigid_motion_is_isometry() {
        let m = crate::geometry::primitives::box_mesh(Vec3::new(0.02, 0.03, 0.04), 2);
        let dof = ObjectDoF {
            axis_angle: Vec3::new(0.4, -1.1, 0.3),
            translation: Vec3::new(0.1, -0.2, 0.05),
        };
        let p = pose_object(&dof, &m);
        let (a, b) = (m.vertices(), p.vertices());
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                assert!(((a[i] - a[j]).norm() - (b[i] - b[j]).norm()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dof_array_round_trip() {
        let mut h = HandDoF::default();
        h.pose[14] = 0.7;
        h.translation.y = -0.2;
        assert_eq!(HandDoF::from_array(&h.to_array()), h);
        let o = ObjectDoF {
            axis_angle: Vec3::new(1.0, 2.0, 3.0),
            translation: Vec3::new(4.0, 5.0, 6.0),
        };
        assert_eq!(o.to_array(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}
