//! Synthetic static grasps with known poses, contact labels and an
//! equilibrium force certificate.
//!
//! Grasps are built in the hand's rest frame, where gravity runs along the
//! hand's `-y` axis and every finger flexes in a horizontal plane. The object
//! is placed in the space between the open thumb and fingers; each grasping
//! finger is then curled until it just touches the object surface.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::forces::PhysicsConstants;
use crate::geometry::{primitives, MeshDistance, TriMesh, Vec3};
use crate::kinematics::{axis_angle_to_matrix, surrogate, HandDoF, ObjectDoF, SkinnedHandModel};
use crate::scene::{EquilibriumCertificate, FrameCertificate, SceneTrajectory, TruthLabel};

/// Depth the grasping fingers press into the object.
const CONTACT_DEPTH: f64 = 2e-4;
/// Object vertices closer than this are labeled in contact.
pub const TRUTH_CONTACT: f64 = 1e-3;
/// Object vertices farther than this are labeled free.
pub const TRUTH_FREE: f64 = 5e-3;
const DEFAULT_SPACING: f64 = 2.5e-3;
const TOUCH: f64 = 5e-4;
const MAX_DEPTH: f64 = 2e-3;
const OPEN_CLEARANCE: f64 = 3e-3;
const MAX_CURL: f64 = 1.6;
/// Upper bound on how fast any finger vertex moves per radian of curl.
const SWEEP_SPEED: f64 = 0.3;
const MIN_CURL_STEP: f64 = 0.005;
/// Best-scoring placements tried for a force certificate.
const MAX_PLACEMENT_TRIES: usize = 6;
const GRID_STEP: f64 = 0.01;
const GRID_X: usize = 14;
const GRID_Z: usize = 13;
/// Fraction of the friction cone and force bound the solver aims for.
const CONE_SHRINK: f64 = 0.97;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenegenError {
    #[error("a static grasp needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("no valid grasp placement: {0}")]
    NoGrasp(String),
    #[error("no equilibrium certificate: {0}")]
    NoCertificate(String),
    #[error("invalid grasp configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Sphere,
    Box,
    Cylinder,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 3] = [ObjectShape::Sphere, ObjectShape::Box, ObjectShape::Cylinder];
}

impl fmt::Display for ObjectShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectShape::Sphere => "sphere",
            ObjectShape::Box => "box",
            ObjectShape::Cylinder => "cylinder",
        })
    }
}

impl FromStr for ObjectShape {
    type Err = ScenegenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(ObjectShape::Sphere),
            "box" => Ok(ObjectShape::Box),
            "cylinder" => Ok(ObjectShape::Cylinder),
            _ => Err(ScenegenError::Invalid(format!("unknown shape '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspStyle {
    /// Thumb against index finger.
    Pinch,
    /// Thumb against all four fingers, contacts on the object's sides.
    Wrap,
}

impl GraspStyle {
    pub const ALL: [GraspStyle; 2] = [GraspStyle::Pinch, GraspStyle::Wrap];

    fn fingers(self) -> &'static [usize] {
        match self {
            GraspStyle::Pinch => &[0, 1],
            GraspStyle::Wrap => &[0, 1, 2, 3, 4],
        }
    }
}

impl fmt::Display for GraspStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraspStyle::Pinch => "pinch",
            GraspStyle::Wrap => "wrap",
        })
    }
}

impl FromStr for GraspStyle {
    type Err = ScenegenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pinch" => Ok(GraspStyle::Pinch),
            "wrap" | "wrap-side" => Ok(GraspStyle::Wrap),
            _ => Err(ScenegenError::Invalid(format!("unknown grasp style '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspConfig {
    pub shape: ObjectShape,
    pub style: GraspStyle,
    pub frames: usize,
    pub seed: u64,
    pub consts: PhysicsConstants,
    /// Target edge length of the object mesh in meters.
    pub object_spacing: f64,
}

impl GraspConfig {
    pub fn new(shape: ObjectShape, style: GraspStyle, frames: usize, seed: u64) -> Self {
        Self {
            shape,
            style,
            frames,
            seed,
            consts: PhysicsConstants::default(),
            object_spacing: DEFAULT_SPACING,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: SceneTrajectory,
    pub truth: Vec<TruthLabel>,
    pub certificate: EquilibriumCertificate,
    /// Signed distance of every object vertex to the true hand surface.
    pub object_distances: Vec<f64>,
    /// Curl coefficient of each grasping finger, thumb first.
    pub curls: Vec<(usize, f64)>,
}

/// Object mesh in its rest frame for the given shape and grasp, scaled by
/// `scale`, with edges of roughly `spacing` meters.
pub fn object_mesh(shape: ObjectShape, style: GraspStyle, scale: f64, spacing: f64) -> TriMesh {
    match (shape, style) {
        (ObjectShape::Sphere, _) => {
            let radius = scale
                * match style {
                    GraspStyle::Pinch => 0.022,
                    GraspStyle::Wrap => 0.038,
                };
            // An icosphere level-k edge is about 1.1 r / 2^k.
            let mut level = 0;
            while level < 4 && 1.1 * radius / (1u32 << level) as f64 > spacing {
                level += 1;
            }
            primitives::icosphere(radius, level)
        }
        (ObjectShape::Box, _) => {
            let half = match style {
                GraspStyle::Pinch => Vec3::new(0.018, 0.03, 0.018),
                GraspStyle::Wrap => Vec3::new(0.026, 0.045, 0.026),
            } * scale;
            let n = ((2.0 * half.x / spacing).ceil() as usize).max(4);
            primitives::box_mesh(half, n)
        }
        (ObjectShape::Cylinder, _) => {
            let (r, h) = match style {
                GraspStyle::Pinch => (0.018, 0.06),
                GraspStyle::Wrap => (0.027, 0.10),
            };
            let (r, h) = (r * scale, h * scale);
            let segments = (2.0 * std::f64::consts::PI * r / spacing).ceil() as usize;
            let rings = (h / spacing).ceil() as usize;
            primitives::cylinder(r, h, segments, rings)
        }
    }
}

fn rotation_y(angle: f64) -> Matrix3<f64> {
    axis_angle_to_matrix(&Vec3::new(0.0, angle, 0.0))
}

/// Which finger (0 thumb .. 4 pinky) a hand vertex belongs to, if any.
fn vertex_finger(model: &SkinnedHandModel, v: usize) -> Option<usize> {
    let (j, _) = model.skin_weights()[v]
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    (j > 0).then(|| (j - 1) / 3)
}

struct Placement {
    center: Vec3,
    hand: HandDoF,
    score: f64,
}

/// Distance to the object posed at `center` with `rotation`, queried in its
/// rest frame.
struct LocalDistance<'a> {
    rest: &'a MeshDistance,
    rotation: Matrix3<f64>,
    center: Vec3,
}

impl LocalDistance<'_> {
    fn distance(&self, p: &Vec3) -> f64 {
        self.rest.query(&(self.rotation.transpose() * (p - self.center))).distance
    }
}

struct Search<'a> {
    model: &'a SkinnedHandModel,
    open: Vec<Vec3>,
    finger_vertices: Vec<Vec<usize>>,
    style: GraspStyle,
}

impl Search<'_> {
    fn min_distance(&self, dist: &LocalDistance, hand: &HandDoF, vertices: &[usize]) -> f64 {
        self.model
            .posed_subset(hand, vertices)
            .iter()
            .map(|p| dist.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest curl at which the finger touches the object with the target
    /// depth, if it reaches it.
    fn curl_to_contact(&self, dist: &LocalDistance, finger: usize) -> Option<f64> {
        let verts = &self.finger_vertices[finger];
        let at = |c: f64| {
            let mut h = HandDoF::default();
            h.pose[3 * finger] = c;
            self.min_distance(dist, &h, verts) + CONTACT_DEPTH
        };
        // March in curl with steps no finger vertex can cover faster than
        // the remaining clearance.
        let mut lo = 0.0;
        let mut gap = at(lo);
        if gap <= 0.0 {
            return None;
        }
        let mut hi = None;
        while lo < MAX_CURL {
            let c = (lo + (gap / SWEEP_SPEED).max(MIN_CURL_STEP)).min(MAX_CURL);
            let g = at(c);
            if g <= 0.0 {
                hi = Some(c);
                break;
            }
            lo = c;
            gap = g;
        }
        let mut hi = hi?;
        for _ in 0..24 {
            let mid = 0.5 * (lo + hi);
            if at(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(hi)
    }

    fn try_center(&self, rest: &MeshDistance, rest_mesh: &TriMesh, rotation: &Matrix3<f64>, center: Vec3) -> Option<Placement> {
        let dist = LocalDistance {
            rest,
            rotation: *rotation,
            center,
        };
        if self.open.iter().any(|p| dist.distance(p) < OPEN_CLEARANCE) {
            return None;
        }
        let mut hand = HandDoF::default();
        for &f in self.style.fingers() {
            hand.pose[3 * f] = self.curl_to_contact(&dist, f)?;
        }
        let posed = self.model.forward(&hand).vertices;
        if posed.iter().any(|p| dist.distance(p) < -MAX_DEPTH) {
            return None;
        }
        let object = rest_mesh.transformed(rotation, &center);
        let mesh = TriMesh::new(posed, self.model.rest_mesh().triangles().to_vec()).ok()?;
        let hand_dist = MeshDistance::new(&mesh).ok()?;
        let mut patch_normal = [Vec3::zeros(); 5];
        let mut patch_count = [0usize; 5];
        for (v, n) in object.vertices().iter().zip(object.normals()) {
            let q = hand_dist.query(v);
            if q.distance < -MAX_DEPTH {
                return None;
            }
            if q.distance < TOUCH {
                let corner = self.model.rest_mesh().triangles()[q.closest_triangle][0];
                if let Some(f) = vertex_finger(self.model, corner) {
                    patch_normal[f] += n;
                    patch_count[f] += 1;
                }
            }
        }
        if self.style.fingers().iter().any(|&f| patch_count[f] == 0) {
            return None;
        }
        let thumb = patch_normal[0].normalize();
        let fingers: Vec3 = self.style.fingers()[1..].iter().map(|&f| patch_normal[f].normalize()).sum();
        let opposition = -thumb.dot(&fingers.normalize());
        if opposition < 0.3 {
            return None;
        }
        Some(Placement { center, hand, score: opposition })
    }
}

/// Builds a static grasp of a generated object by the built-in hand.
pub fn generate_static_grasp(config: &GraspConfig) -> Result<SyntheticScene, ScenegenError> {
    if config.frames < 3 {
        return Err(ScenegenError::TooFewFrames(config.frames));
    }
    config
        .consts
        .validate()
        .map_err(|e| ScenegenError::Invalid(e.to_string()))?;
    if !(config.object_spacing > 0.0 && config.object_spacing.is_finite()) {
        return Err(ScenegenError::Invalid(format!("mesh spacing {}", config.object_spacing)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = rng.random_range(0.92..=1.08);
    let object_yaw = match config.shape {
        ObjectShape::Sphere => 0.0,
        _ => rng.random_range(-0.3..=0.3),
    };
    let world_yaw: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let world_shift = Vec3::new(
        rng.random_range(-0.1..=0.1),
        rng.random_range(-0.1..=0.1),
        rng.random_range(-0.1..=0.1),
    );

    let model = surrogate::builtin_hand();
    let rest = object_mesh(config.shape, config.style, scale, config.object_spacing);
    let local_rotation = rotation_y(object_yaw);
    let rest_distance = MeshDistance::new(&rest).map_err(|e| ScenegenError::Invalid(e.to_string()))?;
    let search = Search {
        model: &model,
        open: model.forward(&HandDoF::default()).vertices,
        finger_vertices: (0..5).map(|f| model.influenced_vertices(1 + 3 * f)).collect(),
        style: config.style,
    };
    let height = match config.style {
        GraspStyle::Pinch => 0.03,
        GraspStyle::Wrap => 0.0,
    };
    let mut placements = Vec::new();
    for ix in 0..=GRID_X {
        for iz in 0..=GRID_Z {
            let center = Vec3::new(0.08 + GRID_STEP * ix as f64, height, -0.14 + GRID_STEP * iz as f64);
            if let Some(p) = search.try_center(&rest_distance, &rest, &local_rotation, center) {
                placements.push(p);
            }
        }
    }
    if placements.is_empty() {
        return Err(ScenegenError::NoGrasp(format!(
            "{} {} at scale {scale:.3}",
            config.style, config.shape
        )));
    }
    placements.sort_by(|a, b| b.score.total_cmp(&a.score));

    let world = rotation_y(world_yaw);
    let rest = Arc::new(rest);
    let mut first_error = None;
    for placement in placements.iter().take(MAX_PLACEMENT_TRIES) {
        let object_pose = ObjectDoF {
            axis_angle: Vec3::new(0.0, world_yaw + object_yaw, 0.0),
            translation: world * placement.center + world_shift,
        };
        let hand_pose = HandDoF {
            axis_angle: Vec3::new(0.0, world_yaw, 0.0),
            translation: world_shift,
            pose: placement.hand.pose,
        };
        let scene = SceneTrajectory {
            object_mesh: rest.clone(),
            hand_model: model.clone(),
            mass: config.consts.mass,
            frame_dt: config.consts.frame_dt,
            object: vec![object_pose; config.frames],
            hand: vec![hand_pose; config.frames],
        };
        match finish_scene(scene, config, placement) {
            Ok(s) => return Ok(s),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    Err(first_error.unwrap())
}

fn finish_scene(
    scene: SceneTrajectory,
    config: &GraspConfig,
    placement: &Placement,
) -> Result<SyntheticScene, ScenegenError> {
    let model = &scene.hand_model;
    let posed_object = scene.posed_object(0);
    let hand_vertices = model.forward(&scene.hand[0]).vertices;
    let hand_mesh = TriMesh::new(hand_vertices, model.rest_mesh().triangles().to_vec())
        .map_err(|e| ScenegenError::NoGrasp(e.to_string()))?;
    let hand_dist = MeshDistance::new(&hand_mesh).map_err(|e| ScenegenError::NoGrasp(e.to_string()))?;
    let object_distances: Vec<f64> = posed_object
        .vertices()
        .iter()
        .map(|v| hand_dist.query(v).distance)
        .collect();
    let truth: Vec<TruthLabel> = object_distances
        .iter()
        .map(|&d| {
            if d < TRUTH_CONTACT {
                Some(true)
            } else if d > TRUTH_FREE {
                Some(false)
            } else {
                None
            }
        })
        .collect();

    let contacts: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == Some(true)).collect();
    let normals: Vec<Vec3> = contacts.iter().map(|&i| posed_object.normals()[i]).collect();
    let frame = solve_certificate(&contacts, &normals, &config.consts)?;
    let certificate = EquilibriumCertificate {
        sample_count: contacts.len(),
        frames: vec![frame; config.frames],
    };
    let curls = config
        .style
        .fingers()
        .iter()
        .map(|&f| (f, placement.hand.pose[3 * f]))
        .collect();
    Ok(SyntheticScene {
        scene,
        truth,
        certificate,
        object_distances,
        curls,
    })
}

/// Closest point of the 2D triangle `{0 <= a <= cap, 0 <= r <= mu a}` to
/// `(a, r)` with `r >= 0`.
fn project_truncated_cone_2d(a: f64, r: f64, mu: f64, cap: f64) -> (f64, f64) {
    if mu == 0.0 {
        return (a.clamp(0.0, cap), 0.0);
    }
    if a >= 0.0 && a <= cap && r <= mu * a {
        return (a, r);
    }
    let segment = |p: (f64, f64), q: (f64, f64)| {
        let d = (q.0 - p.0, q.1 - p.1);
        let t = (((a - p.0) * d.0 + (r - p.1) * d.1) / (d.0 * d.0 + d.1 * d.1)).clamp(0.0, 1.0);
        (p.0 + t * d.0, p.1 + t * d.1)
    };
    let corners = [(0.0, 0.0), (cap, 0.0), (cap, mu * cap)];
    (0..3)
        .map(|k| segment(corners[k], corners[(k + 1) % 3]))
        .min_by(|x, y| {
            let dx = (x.0 - a).powi(2) + (x.1 - r).powi(2);
            let dy = (y.0 - a).powi(2) + (y.1 - r).powi(2);
            dx.total_cmp(&dy)
        })
        .unwrap()
}

/// Projection of `f` onto the friction cone pushing along `axis`, with the
/// normal component capped at `cap`.
fn project_force(f: &Vec3, axis: &Vec3, mu: f64, cap: f64) -> Vec3 {
    let a = f.dot(axis);
    let tangent = f - axis * a;
    let r = tangent.norm();
    let (pa, pr) = project_truncated_cone_2d(a, r, mu, cap);
    if r > 0.0 {
        axis * pa + tangent * (pr / r)
    } else {
        axis * pa
    }
}

/// Forces at contact vertices with outward `normals` whose mean plus `m g`
/// vanishes, each inside its friction cone with normal part at most `F_max`.
///
/// Minimizes the total squared force by accelerated dual ascent on the
/// balance constraint, then removes the remaining imbalance exactly using
/// vertices well inside their cones.
pub fn solve_certificate(
    vertices: &[usize],
    normals: &[Vec3],
    consts: &PhysicsConstants,
) -> Result<FrameCertificate, ScenegenError> {
    let n = normals.len();
    if n == 0 {
        return Err(ScenegenError::NoCertificate("no contact vertices".into()));
    }
    let target = -consts.weight() * n as f64;
    let mu = consts.friction * CONE_SHRINK;
    let cap = consts.max_normal_force * CONE_SHRINK;
    let axes: Vec<Vec3> = normals.iter().map(|v| -v.normalize()).collect();
    let forces_at = |lambda: &Vec3| -> Vec<Vec3> { axes.iter().map(|u| project_force(lambda, u, mu, cap)).collect() };

    let step = 1.0 / n as f64;
    let tol = 1e-7 * target.norm();
    let mut lambda = Vec3::zeros();
    let mut y = lambda;
    let mut forces = Vec::new();
    let mut converged = false;
    let mut k = 0.0;
    for _ in 0..50_000 {
        forces = forces_at(&y);
        let residual = target - forces.iter().sum::<Vec3>();
        if residual.norm() <= tol {
            converged = true;
            break;
        }
        let next = y + residual * step;
        k += 1.0;
        y = next + (next - lambda) * (k / (k + 3.0));
        lambda = next;
    }
    if !converged {
        let residual = target - forces.iter().sum::<Vec3>();
        return Err(ScenegenError::NoCertificate(format!(
            "contact forces within the friction cones cannot balance gravity over {n} contacts (imbalance {:.3e} N)",
            residual.norm() / n as f64
        )));
    }

    // Exact balance: spread the leftover over vertices with slack.
    let residual = target - forces.iter().sum::<Vec3>();
    let strong: Vec<usize> = (0..n)
        .filter(|&i| forces[i].dot(&axes[i]) > 0.1 * consts.max_normal_force)
        .collect();
    if !strong.is_empty() {
        let share = residual / strong.len() as f64;
        for &i in &strong {
            forces[i] += share;
        }
    }

    let mut frame = FrameCertificate {
        vertices: vertices.to_vec(),
        normal_forces: Vec::with_capacity(n),
        friction_forces: Vec::with_capacity(n),
    };
    for (f, u) in forces.iter().zip(&axes) {
        let a = f.dot(u).max(0.0);
        let fn_ = u * a;
        let fs = f - fn_;
        let fs = fs - u * fs.dot(u);
        if a > consts.max_normal_force || fs.norm() > consts.friction * a * (1.0 + 1e-12) + 1e-15 {
            return Err(ScenegenError::NoCertificate("balanced forces leave the friction cone".into()));
        }
        frame.normal_forces.push(fn_);
        frame.friction_forces.push(fs);
    }
    let cert = EquilibriumCertificate {
        sample_count: n,
        frames: vec![frame],
    };
    let net = cert.net_force(0, &consts.weight());
    if net.norm() >= 1e-9 {
        return Err(ScenegenError::NoCertificate(format!("residual net force {:.3e} N", net.norm())));
    }
    Ok(cert.frames.into_iter().next().unwrap())
}
