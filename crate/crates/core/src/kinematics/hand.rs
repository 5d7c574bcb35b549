//! Linear blend skinning hand with a linear pose basis and a joint regressor.

use nalgebra::Matrix3;

use super::rotation::RotationJacobian;
use super::{HandDoF, KinematicsError, FINGER_DOF, HAND_DOF, REPORTED_JOINTS};
use crate::geometry::{TriMesh, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub parent: Option<usize>,
    /// Rest-pose position in meters.
    pub position: Vec3,
}

/// Skinned hand: rest mesh, joint tree, sparse skin weights, a pose basis
/// mapping the 15 coefficients to per-joint axis-angle rotations, and a sparse
/// regressor from posed vertices to the 21 reported joints.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedHandModel {
    rest_mesh: TriMesh,
    joints: Vec<Joint>,
    skin_weights: Vec<Vec<(usize, f64)>>,
    pose_basis: Vec<Vec<Vec3>>,
    joint_regressor: Vec<Vec<(usize, f64)>>,
}

impl SkinnedHandModel {
    /// Joint 0 must be the root and every other joint's parent must precede it.
    pub fn new(
        rest_mesh: TriMesh,
        joints: Vec<Joint>,
        skin_weights: Vec<Vec<(usize, f64)>>,
        pose_basis: Vec<Vec<Vec3>>,
        joint_regressor: Vec<Vec<(usize, f64)>>,
    ) -> Result<Self, KinematicsError> {
        let bad = |m: String| Err(KinematicsError::InvalidModel(m));
        let nv = rest_mesh.vertex_count();
        let nj = joints.len();
        if nj == 0 {
            return bad("no joints".into());
        }
        if joints[0].parent.is_some() {
            return bad("joint 0 must be the root".into());
        }
        for (j, joint) in joints.iter().enumerate().skip(1) {
            match joint.parent {
                Some(p) if p < j => {}
                Some(p) => return bad(format!("joint {j} has parent {p}, parents must precede children")),
                None => return bad(format!("joint {j} is a second root")),
            }
        }
        if skin_weights.len() != nv {
            return bad(format!("{} skin weight rows for {nv} vertices", skin_weights.len()));
        }
        for (v, row) in skin_weights.iter().enumerate() {
            let mut sum = 0.0;
            for &(j, w) in row {
                if j >= nj {
                    return bad(format!("vertex {v} weights joint {j}"));
                }
                if w.is_nan() || w < 0.0 {
                    return bad(format!("vertex {v} has negative weight {w}"));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return bad(format!("vertex {v} weights sum to {sum}"));
            }
        }
        if pose_basis.len() != FINGER_DOF || pose_basis.iter().any(|b| b.len() != nj) {
            return bad(format!("pose basis must be {FINGER_DOF} x {nj}"));
        }
        if joint_regressor.len() != REPORTED_JOINTS {
            return bad(format!("joint regressor must have {REPORTED_JOINTS} rows"));
        }
        for row in &joint_regressor {
            if row.iter().any(|&(v, _)| v >= nv) {
                return bad("joint regressor references a missing vertex".into());
            }
        }
        Ok(Self {
            rest_mesh,
            joints,
            skin_weights,
            pose_basis,
            joint_regressor,
        })
    }

    pub fn rest_mesh(&self) -> &TriMesh {
        &self.rest_mesh
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn skin_weights(&self) -> &[Vec<(usize, f64)>] {
        &self.skin_weights
    }

    pub fn pose_basis(&self) -> &[Vec<Vec3>] {
        &self.pose_basis
    }

    pub fn joint_regressor(&self) -> &[Vec<(usize, f64)>] {
        &self.joint_regressor
    }

    pub fn vertex_count(&self) -> usize {
        self.rest_mesh.vertex_count()
    }

    /// Vertices whose skin weights touch joint `j` or any of its descendants.
    pub fn influenced_vertices(&self, j: usize) -> Vec<usize> {
        let mut in_subtree = vec![false; self.joints.len()];
        in_subtree[j] = true;
        for k in (j + 1)..self.joints.len() {
            if let Some(p) = self.joints[k].parent {
                in_subtree[k] |= in_subtree[p];
            }
        }
        (0..self.vertex_count())
            .filter(|&v| self.skin_weights[v].iter().any(|&(jj, w)| w > 0.0 && in_subtree[jj]))
            .collect()
    }

    /// Local joint rotations, global joint rotations and skinning
    /// translations `A_j(v) = G_j.R (v - J_j) + G_j.t`.
    fn joint_transforms(&self, dof: &HandDoF) -> (Vec<RotationJacobian>, Vec<Matrix3<f64>>, Vec<Vec3>) {
        let nj = self.joints.len();
        let mut local = Vec::with_capacity(nj);
        let mut global_r = Vec::with_capacity(nj);
        let mut global_t = Vec::with_capacity(nj);
        for (j, joint) in self.joints.iter().enumerate() {
            let mut aa = Vec3::zeros();
            for (k, c) in dof.pose.iter().enumerate() {
                if *c != 0.0 {
                    aa += self.pose_basis[k][j] * *c;
                }
            }
            let rot = RotationJacobian::new(&aa);
            let (gr, gt) = match joint.parent {
                None => (rot.matrix, joint.position),
                Some(p) => {
                    let offset = joint.position - self.joints[p].position;
                    let pr: Matrix3<f64> = global_r[p];
                    (pr * rot.matrix, pr * offset + global_t[p])
                }
            };
            local.push(rot);
            global_r.push(gr);
            global_t.push(gt);
        }
        let skin_t = (0..nj)
            .map(|j| global_t[j] - global_r[j] * self.joints[j].position)
            .collect();
        (local, global_r, skin_t)
    }

    /// Posed positions of the listed vertices only.
    pub fn posed_subset(&self, dof: &HandDoF, subset: &[usize]) -> Vec<Vec3> {
        let (_, global_r, skin_t) = self.joint_transforms(dof);
        let root = crate::kinematics::axis_angle_to_matrix(&dof.axis_angle);
        let rest = self.rest_mesh.vertices();
        subset
            .iter()
            .map(|&v| {
                let p: Vec3 = self.skin_weights[v]
                    .iter()
                    .map(|&(j, w)| (global_r[j] * rest[v] + skin_t[j]) * w)
                    .sum();
                root * p + dof.translation
            })
            .collect()
    }

    /// Runs forward kinematics and skinning, keeping what the backward pass
    /// needs.
    pub fn forward(&self, dof: &HandDoF) -> HandForward {
        let (local, global_r, skin_t) = self.joint_transforms(dof);
        let root = RotationJacobian::new(&dof.axis_angle);
        let rest = self.rest_mesh.vertices();
        let mut skinned = Vec::with_capacity(rest.len());
        let mut vertices = Vec::with_capacity(rest.len());
        for (v, row) in rest.iter().zip(&self.skin_weights) {
            let mut p = Vec3::zeros();
            for &(j, w) in row {
                p += (global_r[j] * v + skin_t[j]) * w;
            }
            skinned.push(p);
            vertices.push(root.matrix * p + dof.translation);
        }
        let joints = self
            .joint_regressor
            .iter()
            .map(|row| row.iter().map(|&(v, w)| vertices[v] * w).sum())
            .collect();
        HandForward {
            vertices,
            joints,
            skinned,
            local,
            global_r,
            root,
        }
    }

    /// Reverse pass: gradient of a scalar with respect to the 21 hand DoF
    /// given its gradient with respect to posed vertices and regressed joints.
    /// `vertex_adjoint` may be empty when only joints are used.
    pub fn backward(
        &self,
        fwd: &HandForward,
        vertex_adjoint: &[Vec3],
        joint_adjoint: &[Vec3],
    ) -> [f64; HAND_DOF] {
        let nv = self.vertex_count();
        let mut vbar: Vec<Vec3> = if vertex_adjoint.is_empty() {
            vec![Vec3::zeros(); nv]
        } else {
            vertex_adjoint.to_vec()
        };
        for (row, jbar) in self.joint_regressor.iter().zip(joint_adjoint) {
            if *jbar == Vec3::zeros() {
                continue;
            }
            for &(v, w) in row {
                vbar[v] += jbar * w;
            }
        }

        let nj = self.joints.len();
        let mut root_rbar = Matrix3::zeros();
        let mut tbar = Vec3::zeros();
        let mut skin_rbar = vec![Matrix3::<f64>::zeros(); nj];
        let mut skin_tbar = vec![Vec3::zeros(); nj];
        let rt = fwd.root.matrix.transpose();
        let rest = self.rest_mesh.vertices();
        for v in 0..nv {
            let g = vbar[v];
            if g == Vec3::zeros() {
                continue;
            }
            root_rbar += g * fwd.skinned[v].transpose();
            tbar += g;
            let gs = rt * g;
            let outer = gs * rest[v].transpose();
            for &(j, w) in &self.skin_weights[v] {
                skin_rbar[j] += outer * w;
                skin_tbar[j] += gs * w;
            }
        }

        // Through A_j = (G_j.R, G_j.t - G_j.R J_j) to G_j.
        let mut g_rbar: Vec<Matrix3<f64>> = (0..nj)
            .map(|j| skin_rbar[j] - skin_tbar[j] * self.joints[j].position.transpose())
            .collect();
        let mut g_tbar = skin_tbar;
        let mut local_rbar = vec![Matrix3::<f64>::zeros(); nj];
        for j in (0..nj).rev() {
            match self.joints[j].parent {
                None => local_rbar[j] = g_rbar[j],
                Some(p) => {
                    let offset = self.joints[j].position - self.joints[p].position;
                    local_rbar[j] = fwd.global_r[p].transpose() * g_rbar[j];
                    let add_r = g_rbar[j] * fwd.local[j].matrix.transpose() + g_tbar[j] * offset.transpose();
                    let add_t = g_tbar[j];
                    g_rbar[p] += add_r;
                    g_tbar[p] += add_t;
                }
            }
        }

        let mut out = [0.0; HAND_DOF];
        let aa_bar = fwd.root.pullback(&root_rbar);
        out[..3].copy_from_slice(aa_bar.as_slice());
        out[3..6].copy_from_slice(tbar.as_slice());
        for j in 0..nj {
            if local_rbar[j] == Matrix3::zeros() {
                continue;
            }
            let local_aa_bar = fwd.local[j].pullback(&local_rbar[j]);
            for k in 0..FINGER_DOF {
                out[6 + k] += self.pose_basis[k][j].dot(&local_aa_bar);
            }
        }
        out
    }
}

/// Intermediate results of [`SkinnedHandModel::forward`].
#[derive(Debug, Clone)]
pub struct HandForward {
    /// Posed vertices in world coordinates.
    pub vertices: Vec<Vec3>,
    /// The 21 regressed joints in world coordinates.
    pub joints: Vec<Vec3>,
    skinned: Vec<Vec3>,
    local: Vec<RotationJacobian>,
    global_r: Vec<Matrix3<f64>>,
    root: RotationJacobian,
}

/// Posed hand mesh (with refreshed normals) and its 21 regressed joints.
pub fn pose_hand(dof: &HandDoF, model: &SkinnedHandModel) -> Result<(TriMesh, Vec<Vec3>), KinematicsError> {
    let fwd = model.forward(dof);
    let mut mesh = model.rest_mesh().clone();
    mesh.set_vertices(fwd.vertices)?;
    Ok((mesh, fwd.joints))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::surrogate::builtin_hand;
    use crate::kinematics::{pose_object, ObjectDoF};

    #[test]
    fn zero_dof_is_rest() {
        let model = builtin_hand();
        let (mesh, joints) = pose_hand(&HandDoF::default(), &model).unwrap();
        for (a, b) in mesh.vertices().iter().zip(model.rest_mesh().vertices()) {
            assert!((a - b).norm() < 1e-15);
        }
        for (j, rest) in joints.iter().zip(model.joints()) {
            assert!((j - rest.position).norm() < 1e-12);
        }
    }

    #[test]
    fn rigid_only_matches_object_posing() {
        let model = builtin_hand();
        let dof = HandDoF {
            axis_angle: Vec3::new(0.3, -0.5, 0.2),
            translation: Vec3::new(0.01, 0.2, -0.1),
            pose: [0.0; FINGER_DOF],
        };
        let (mesh, _) = pose_hand(&dof, &model).unwrap();
        let obj = pose_object(
            &ObjectDoF {
                axis_angle: dof.axis_angle,
                translation: dof.translation,
            },
            model.rest_mesh(),
        );
        for (a, b) in mesh.vertices().iter().zip(obj.vertices()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_weights() {
        let m = builtin_hand();
        let mut w = m.skin_weights().to_vec();
        w[0] = vec![(0, 0.7)];
        let err = SkinnedHandModel::new(
            m.rest_mesh().clone(),
            m.joints().to_vec(),
            w,
            m.pose_basis().to_vec(),
            m.joint_regressor().to_vec(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("sum to"));
    }

    #[test]
    fn rejects_cyclic_parents() {
        let m = builtin_hand();
        let mut joints = m.joints().to_vec();
        joints[2].parent = Some(5);
        assert!(SkinnedHandModel::new(
            m.rest_mesh().clone(),
            joints,
            m.skin_weights().to_vec(),
            m.pose_basis().to_vec(),
            m.joint_regressor().to_vec(),
        )
        .is_err());
    }
}
