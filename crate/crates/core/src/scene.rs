//! Hand-object trajectories and their text file format.
//!
//! ```text
//! SCENE 1
//! object <obj path, relative to the scene file>
//! model builtin:hand | <skinning model path>
//! mass <kg>
//! frame_dt <s>
//! frames <T>
//! <6 object DoF> <21 hand DoF>        one row per frame
//! truth <n> <string of 1, 0 or - per object vertex>     (optional)
//! certificate <frames> <sample count> <rows>            (optional)
//! <frame> <vertex> <fn x y z> <fs x y z>                 one row per contact
//! end
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::{read_obj, GeometryError, TriMesh, Vec3};
use crate::kinematics::{
    pose_object, read_skin_model, surrogate, HandDoF, KinematicsError, ObjectDoF, SkinnedHandModel, HAND_DOF,
    OBJECT_DOF,
};

pub const BUILTIN_HAND: &str = "builtin:hand";
const HEADER: &str = "SCENE 1";

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("scene file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("{0}")]
    Io(String),
}

/// Per-frame poses of one rigid object and one hand.
#[derive(Debug, Clone)]
pub struct SceneTrajectory {
    pub object_mesh: Arc<TriMesh>,
    pub hand_model: Arc<SkinnedHandModel>,
    pub mass: f64,
    pub frame_dt: f64,
    pub object: Vec<ObjectDoF>,
    pub hand: Vec<HandDoF>,
}

impl SceneTrajectory {
    pub fn frames(&self) -> usize {
        self.object.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.object.is_empty() {
            return Err(SceneError::Invalid("no frames".into()));
        }
        if self.object.len() != self.hand.len() {
            return Err(SceneError::Invalid(format!(
                "{} object frames but {} hand frames",
                self.object.len(),
                self.hand.len()
            )));
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(SceneError::Invalid(format!("mass {}", self.mass)));
        }
        if !(self.frame_dt > 0.0 && self.frame_dt.is_finite()) {
            return Err(SceneError::Invalid(format!("frame interval {}", self.frame_dt)));
        }
        if let Some(t) = (0..self.frames()).find(|&t| !self.object[t].is_finite() || !self.hand[t].is_finite()) {
            return Err(SceneError::Invalid(format!("non-finite pose at frame {t}")));
        }
        Ok(())
    }

    pub fn posed_object(&self, t: usize) -> TriMesh {
        pose_object(&self.object[t], &self.object_mesh)
    }

    /// The 21 regressed hand joints at frame `t`.
    pub fn hand_joints(&self, t: usize) -> Vec<Vec3> {
        self.hand_model.forward(&self.hand[t]).joints
    }

    pub fn all_hand_joints(&self) -> Vec<Vec<Vec3>> {
        (0..self.frames()).map(|t| self.hand_joints(t)).collect()
    }

    /// Same meshes and constants with new poses.
    pub fn with_poses(&self, object: Vec<ObjectDoF>, hand: Vec<HandDoF>) -> Self {
        Self {
            object,
            hand,
            ..self.clone()
        }
    }
}

/// Oracle forces on the contact vertices of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCertificate {
    pub vertices: Vec<usize>,
    pub normal_forces: Vec<Vec3>,
    pub friction_forces: Vec<Vec3>,
}

/// Per-frame force assignments that balance the observed motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    /// Divisor of the force sum (the number of sampled vertices it stands for).
    pub sample_count: usize,
    pub frames: Vec<FrameCertificate>,
}

impl EquilibriumCertificate {
    /// `m g + (1 / N) * sum(f_n + f_s)` for frame `t`.
    pub fn net_force(&self, t: usize, weight: &Vec3) -> Vec3 {
        let f = &self.frames[t];
        let sum: Vec3 = f
            .normal_forces
            .iter()
            .zip(&f.friction_forces)
            .map(|(a, b)| a + b)
            .sum();
        weight + sum / self.sample_count as f64
    }
}

/// Truth label of one object vertex.
pub type TruthLabel = Option<bool>;

/// A scene plus the file references and optional annotations stored with it.
#[derive(Debug, Clone)]
pub struct SceneFile {
    pub scene: SceneTrajectory,
    pub object_ref: String,
    pub model_ref: String,
    pub truth: Option<Vec<TruthLabel>>,
    pub certificate: Option<EquilibriumCertificate>,
}

pub fn load_model(reference: &str, base: &Path) -> Result<Arc<SkinnedHandModel>, SceneError> {
    if reference == BUILTIN_HAND {
        Ok(surrogate::builtin_hand())
    } else {
        Ok(Arc::new(read_skin_model(&resolve(base, reference))?))
    }
}

fn resolve(base: &Path, reference: &str) -> PathBuf {
    let p = Path::new(reference);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn to_scene_text(file: &SceneFile) -> String {
    let s = &file.scene;
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "object {}", file.object_ref);
    let _ = writeln!(out, "model {}", file.model_ref);
    let _ = writeln!(out, "mass {:e}", s.mass);
    let _ = writeln!(out, "frame_dt {:e}", s.frame_dt);
    let _ = writeln!(out, "frames {}", s.frames());
    for t in 0..s.frames() {
        let row: Vec<String> = s.object[t]
            .to_array()
            .iter()
            .chain(s.hand[t].to_array().iter())
            .map(|x| format!("{x:e}"))
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    if let Some(truth) = &file.truth {
        let bits: String = truth
            .iter()
            .map(|l| match l {
                Some(true) => '1',
                Some(false) => '0',
                None => '-',
            })
            .collect();
        let _ = writeln!(out, "truth {} {bits}", truth.len());
    }
    if let Some(cert) = &file.certificate {
        let rows: usize = cert.frames.iter().map(|f| f.vertices.len()).sum();
        let _ = writeln!(out, "certificate {} {} {rows}", cert.frames.len(), cert.sample_count);
        for (t, f) in cert.frames.iter().enumerate() {
            for k in 0..f.vertices.len() {
                let (a, b) = (f.normal_forces[k], f.friction_forces[k]);
                let _ = writeln!(
                    out,
                    "{t} {} {:e} {:e} {:e} {:e} {:e} {:e}",
                    f.vertices[k], a.x, a.y, a.z, b.x, b.y, b.z
                );
            }
        }
    }
    let _ = writeln!(out, "end");
    out
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Result<Vec<&'a str>, SceneError> {
        for (i, raw) in self.lines.by_ref() {
            self.line = i + 1;
            let t = raw.trim();
            if !t.is_empty() && !t.starts_with('#') {
                return Ok(t.split_whitespace().collect());
            }
        }
        Err(self.err("unexpected end of file"))
    }

    fn err(&self, m: &str) -> SceneError {
        SceneError::Parse {
            line: self.line,
            message: m.to_string(),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>, SceneError> {
        let f = self.next()?;
        if f.first() != Some(&key) || f.len() < 2 {
            return Err(self.err(&format!("expected '{key}'")));
        }
        Ok(f[1..].to_vec())
    }

    fn num<T: std::str::FromStr>(&self, s: &str) -> Result<T, SceneError> {
        s.parse().map_err(|_| self.err(&format!("bad number '{s}'")))
    }
}

/// Parses scene text. Mesh and model references are resolved against `base`.
pub fn parse_scene(text: &str, base: &Path) -> Result<SceneFile, SceneError> {
    let mut r = Reader {
        lines: text.lines().enumerate(),
        line: 0,
    };
    if r.next()?.join(" ") != HEADER {
        return Err(r.err("missing 'SCENE 1' header"));
    }
    let object_ref = r.keyed("object")?.join(" ");
    let model_ref = r.keyed("model")?.join(" ");
    let mass: f64 = {
        let f = r.keyed("mass")?;
        r.num(f[0])?
    };
    let frame_dt: f64 = {
        let f = r.keyed("frame_dt")?;
        r.num(f[0])?
    };
    let frames: usize = {
        let f = r.keyed("frames")?;
        r.num(f[0])?
    };
    let mut object = Vec::with_capacity(frames);
    let mut hand = Vec::with_capacity(frames);
    for _ in 0..frames {
        let f = r.next()?;
        if f.len() != OBJECT_DOF + HAND_DOF {
            return Err(r.err(&format!("expected {} values per frame", OBJECT_DOF + HAND_DOF)));
        }
        let vals: Vec<f64> = f.iter().map(|s| r.num(s)).collect::<Result<_, _>>()?;
        let mut o = [0.0; OBJECT_DOF];
        o.copy_from_slice(&vals[..OBJECT_DOF]);
        let mut h = [0.0; HAND_DOF];
        h.copy_from_slice(&vals[OBJECT_DOF..]);
        object.push(ObjectDoF::from_array(&o));
        hand.push(HandDoF::from_array(&h));
    }

    let mut truth = None;
    let mut certificate = None;
    loop {
        let f = r.next()?;
        match f[0] {
            "end" => break,
            "truth" if f.len() == 3 => {
                let n: usize = r.num(f[1])?;
                let labels: Vec<TruthLabel> = f[2]
                    .chars()
                    .map(|c| match c {
                        '1' => Ok(Some(true)),
                        '0' => Ok(Some(false)),
                        '-' => Ok(None),
                        _ => Err(r.err("truth labels must be 1, 0 or -")),
                    })
                    .collect::<Result<_, _>>()?;
                if labels.len() != n {
                    return Err(r.err("truth length does not match its count"));
                }
                truth = Some(labels);
            }
            "certificate" if f.len() == 4 => {
                let nf: usize = r.num(f[1])?;
                let sample_count: usize = r.num(f[2])?;
                let rows: usize = r.num(f[3])?;
                let mut cert = EquilibriumCertificate {
                    sample_count,
                    frames: vec![
                        FrameCertificate {
                            vertices: Vec::new(),
                            normal_forces: Vec::new(),
                            friction_forces: Vec::new(),
                        };
                        nf
                    ],
                };
                for _ in 0..rows {
                    let g = r.next()?;
                    if g.len() != 8 {
                        return Err(r.err("certificate rows have 8 fields"));
                    }
                    let t: usize = r.num(g[0])?;
                    let v: usize = r.num(g[1])?;
                    let x: Vec<f64> = g[2..].iter().map(|s| r.num(s)).collect::<Result<_, _>>()?;
                    let fr = cert.frames.get_mut(t).ok_or_else(|| r.err("certificate frame out of range"))?;
                    fr.vertices.push(v);
                    fr.normal_forces.push(Vec3::new(x[0], x[1], x[2]));
                    fr.friction_forces.push(Vec3::new(x[3], x[4], x[5]));
                }
                certificate = Some(cert);
            }
            other => return Err(r.err(&format!("unexpected section '{other}'"))),
        }
    }

    let object_mesh = Arc::new(read_obj(&resolve(base, &object_ref))?);
    let hand_model = load_model(&model_ref, base)?;
    let scene = SceneTrajectory {
        object_mesh,
        hand_model,
        mass,
        frame_dt,
        object,
        hand,
    };
    scene.validate()?;
    if let Some(t) = &truth {
        if t.len() != scene.object_mesh.vertex_count() {
            return Err(SceneError::Invalid(format!(
                "{} truth labels for {} object vertices",
                t.len(),
                scene.object_mesh.vertex_count()
            )));
        }
    }
    Ok(SceneFile {
        scene,
        object_ref,
        model_ref,
        truth,
        certificate,
    })
}

pub fn read_scene(path: &Path) -> Result<SceneFile, SceneError> {
    let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))?;
    parse_scene(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn write_scene(path: &Path, file: &SceneFile) -> Result<(), SceneError> {
    std::fs::write(path, to_scene_text(file)).map_err(|e| SceneError::Io(format!("{}: {e}", path.display())))
}
