//! Procedurally generated five-finger hand used in place of a licensed hand
//! model.
//!
//! The rest hand has its wrist near the origin, fingers along `+x`, the index
//! finger toward `+y` and the palm facing `-z`. The thumb leaves the palm
//! toward `-z` and flexes up toward the fingers. Joint layout: 0 is the root,
//! finger `f` (thumb, index, middle, ring, pinky) owns joints `1 + 3f`
//! (knuckle), `2 + 3f` and `3 + 3f`. Reported joints 16..20 are the fingertips.
//! Pose coefficient `3f` curls the whole finger, `3f + 1` bends only the
//! knuckle and `3f + 2` spreads the finger sideways.

use std::sync::{Arc, OnceLock};

use super::hand::{Joint, SkinnedHandModel};
use super::FINGER_DOF;
use crate::geometry::{primitives, TriMesh, Vec3};

pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

const RING_SEGMENTS: usize = 8;
const SEGMENT_INTERVALS: usize = 4;
const BLEND_HALF_WIDTH: f64 = 0.006;
/// Tube start, behind the knuckle inside the palm.
const TUBE_START: f64 = -0.012;

/// Geometry of one finger.
#[derive(Debug, Clone, Copy)]
pub struct FingerSpec {
    pub base: Vec3,
    pub direction: Vec3,
    /// Flexion rotates the finger about this axis.
    pub flex_axis: Vec3,
    pub lengths: [f64; 3],
    pub radius: f64,
}

impl FingerSpec {
    fn spread_axis(&self) -> Vec3 {
        self.direction.cross(&self.flex_axis).normalize()
    }

    fn length(&self) -> f64 {
        self.lengths.iter().sum()
    }

    fn radius_at(&self, s: f64) -> f64 {
        self.radius * (1.0 - 0.15 * (s / self.length()).clamp(0.0, 1.0))
    }
}

pub fn finger_specs() -> [FingerSpec; 5] {
    let thumb_dir = Vec3::new(35f64.to_radians().sin(), 0.0, -35f64.to_radians().cos());
    let finger = |y: f64, lengths: [f64; 3], radius: f64| FingerSpec {
        base: Vec3::new(0.095, y, 0.0),
        direction: Vec3::x(),
        flex_axis: Vec3::y(),
        lengths,
        radius,
    };
    [
        FingerSpec {
            base: Vec3::new(0.015, 0.028, -0.004),
            direction: thumb_dir,
            flex_axis: -Vec3::y(),
            lengths: [0.040, 0.032, 0.026],
            radius: 0.0105,
        },
        finger(0.0315, [0.044, 0.026, 0.021], 0.0095),
        finger(0.0105, [0.048, 0.029, 0.023], 0.0095),
        finger(-0.0105, [0.045, 0.027, 0.022], 0.009),
        finger(-0.0315, [0.036, 0.021, 0.019], 0.008),
    ]
}

/// Per-joint flexion (knuckle, middle, distal) of the curl coefficient.
const CURL_PROFILE: [f64; 3] = [0.6, 1.0, 0.8];

/// Shared instance of [`build_hand`].
pub fn builtin_hand() -> Arc<SkinnedHandModel> {
    static HAND: OnceLock<Arc<SkinnedHandModel>> = OnceLock::new();
    HAND.get_or_init(|| Arc::new(build_hand())).clone()
}

pub fn build_hand() -> SkinnedHandModel {
    let specs = finger_specs();
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut regressor: Vec<Vec<(usize, f64)>> = vec![Vec::new(); 21];

    // Palm.
    let palm = primitives::box_mesh(Vec3::new(0.0525, 0.042, 0.013), 4);
    let palm_center = Vec3::new(0.0425, 0.0, 0.0);
    for v in palm.vertices() {
        vertices.push(v + palm_center);
        weights.push(vec![(0, 1.0)]);
    }
    triangles.extend_from_slice(palm.triangles());
    let back: Vec<usize> = (0..vertices.len())
        .filter(|&i| (vertices[i].x + 0.01).abs() < 1e-12)
        .collect();
    let wrist = back.iter().map(|&i| vertices[i]).sum::<Vec3>() / back.len() as f64;
    regressor[0] = back.iter().map(|&i| (i, 1.0 / back.len() as f64)).collect();

    let mut joints = vec![Joint {
        parent: None,
        position: wrist,
    }];

    for (f, spec) in specs.iter().enumerate() {
        let jid = [1 + 3 * f, 2 + 3 * f, 3 + 3 * f];
        let joint_s = [0.0, spec.lengths[0], spec.lengths[0] + spec.lengths[1]];
        for k in 0..3 {
            joints.push(Joint {
                parent: Some(if k == 0 { 0 } else { jid[k - 1] }),
                position: spec.base + spec.direction * joint_s[k],
            });
        }

        let u = spec.direction.normalize();
        let a = spec.flex_axis.normalize();
        let w = u.cross(&a);
        let length = spec.length();

        // Axial stations: two intervals behind the knuckle, then four per segment.
        let mut stations = vec![TUBE_START, TUBE_START / 2.0, 0.0];
        let mut s0 = 0.0;
        for len in spec.lengths {
            for i in 1..=SEGMENT_INTERVALS {
                stations.push(s0 + len * i as f64 / SEGMENT_INTERVALS as f64);
            }
            s0 += len;
        }
        let tip_r = spec.radius_at(length);
        let mut rings: Vec<(f64, f64)> = stations.iter().map(|&s| (s, spec.radius_at(s))).collect();
        for deg in [30.0f64, 60.0, 80.0] {
            let t = deg.to_radians();
            rings.push((length + tip_r * t.sin(), tip_r * t.cos()));
        }

        let skin = |s: f64| -> Vec<(usize, f64)> {
            let owners = [0usize, jid[0], jid[1], jid[2]];
            let bounds = joint_s;
            let mut seg = 0;
            while seg < 3 && s >= bounds[seg] {
                seg += 1;
            }
            // seg: 0 before the knuckle, 1..=3 inside finger segments.
            for (b, &bound) in bounds.iter().enumerate() {
                let t = (s - (bound - BLEND_HALF_WIDTH)) / (2.0 * BLEND_HALF_WIDTH);
                if t > 0.0 && t < 1.0 {
                    let wc = t * t * (3.0 - 2.0 * t);
                    return vec![(owners[b], 1.0 - wc), (owners[b + 1], wc)];
                }
            }
            vec![(owners[seg], 1.0)]
        };

        let first = vertices.len();
        for &(s, r) in &rings {
            for k in 0..RING_SEGMENTS {
                let phi = 2.0 * std::f64::consts::PI * k as f64 / RING_SEGMENTS as f64;
                vertices.push(spec.base + u * s + (a * phi.cos() + w * phi.sin()) * r);
                weights.push(skin(s.min(length)));
            }
        }
        let ring = |i: usize, k: usize| first + i * RING_SEGMENTS + k % RING_SEGMENTS;
        for i in 0..rings.len() - 1 {
            for k in 0..RING_SEGMENTS {
                triangles.push([ring(i, k), ring(i, k + 1), ring(i + 1, k + 1)]);
                triangles.push([ring(i, k), ring(i + 1, k + 1), ring(i + 1, k)]);
            }
        }
        let apex = vertices.len();
        vertices.push(spec.base + u * (length + tip_r));
        weights.push(vec![(jid[2], 1.0)]);
        let last = rings.len() - 1;
        for k in 0..RING_SEGMENTS {
            triangles.push([ring(last, k), ring(last, k + 1), apex]);
        }
        let base_center = vertices.len();
        vertices.push(spec.base + u * TUBE_START);
        weights.push(vec![(0, 1.0)]);
        for k in 0..RING_SEGMENTS {
            triangles.push([base_center, ring(0, k + 1), ring(0, k)]);
        }

        // Joint rings sit exactly at stations 2, 2 + 4 and 2 + 8.
        for (k, &j) in jid.iter().enumerate() {
            let i = 2 + SEGMENT_INTERVALS * k;
            regressor[j] = (0..RING_SEGMENTS)
                .map(|m| (ring(i, m), 1.0 / RING_SEGMENTS as f64))
                .collect();
        }
        regressor[16 + f] = vec![(apex, 1.0)];
    }

    let mut basis = vec![vec![Vec3::zeros(); joints.len()]; FINGER_DOF];
    for (f, spec) in specs.iter().enumerate() {
        let jid = [1 + 3 * f, 2 + 3 * f, 3 + 3 * f];
        let a = spec.flex_axis.normalize();
        for k in 0..3 {
            basis[3 * f][jid[k]] = a * CURL_PROFILE[k];
        }
        basis[3 * f + 1][jid[0]] = a;
        basis[3 * f + 2][jid[0]] = spec.spread_axis();
    }

    let mesh = TriMesh::new(vertices, triangles).expect("surrogate hand mesh is valid");
    SkinnedHandModel::new(mesh, joints, weights, basis, regressor).expect("surrogate hand is valid")
}
