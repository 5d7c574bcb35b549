//! Text serialization of [`SkinnedHandModel`].
//!
//! ```text
//! SKINMODEL 1
//! vertices <n>          followed by n lines "x y z"
//! triangles <m>         followed by m lines "a b c" (0-based)
//! joints <j>            followed by j lines "parent x y z" (parent -1 for the root)
//! skin_weights <k>      followed by k lines "vertex joint weight"
//! pose_basis <c> <j>    followed by c*j lines "coefficient joint ax ay az"
//! joint_regressor <k>   followed by k lines "row vertex weight"
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::hand::{Joint, SkinnedHandModel};
use super::{KinematicsError, FINGER_DOF, REPORTED_JOINTS};
use crate::geometry::{TriMesh, Vec3};

const HEADER: &str = "SKINMODEL 1";

pub fn to_skin_model_text(model: &SkinnedHandModel) -> String {
    let mut out = String::new();
    let mesh = model.rest_mesh();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "vertices {}", mesh.vertex_count());
    for v in mesh.vertices() {
        let _ = writeln!(out, "{:e} {:e} {:e}", v.x, v.y, v.z);
    }
    let _ = writeln!(out, "triangles {}", mesh.triangle_count());
    for t in mesh.triangles() {
        let _ = writeln!(out, "{} {} {}", t[0], t[1], t[2]);
    }
    let _ = writeln!(out, "joints {}", model.joints().len());
    for j in model.joints() {
        let parent = j.parent.map_or(-1, |p| p as i64);
        let _ = writeln!(out, "{parent} {:e} {:e} {:e}", j.position.x, j.position.y, j.position.z);
    }
    let nnz: usize = model.skin_weights().iter().map(Vec::len).sum();
    let _ = writeln!(out, "skin_weights {nnz}");
    for (v, row) in model.skin_weights().iter().enumerate() {
        for &(j, w) in row {
            let _ = writeln!(out, "{v} {j} {w:e}");
        }
    }
    let nj = model.joints().len();
    let _ = writeln!(out, "pose_basis {FINGER_DOF} {nj}");
    for (c, row) in model.pose_basis().iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            let _ = writeln!(out, "{c} {j} {:e} {:e} {:e}", a.x, a.y, a.z);
        }
    }
    let nnz: usize = model.joint_regressor().iter().map(Vec::len).sum();
    let _ = writeln!(out, "joint_regressor {nnz}");
    for (r, row) in model.joint_regressor().iter().enumerate() {
        for &(v, w) in row {
            let _ = writeln!(out, "{r} {v} {w:e}");
        }
    }
    let _ = writeln!(out, "end");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next_fields(&mut self) -> Result<Vec<&'a str>, KinematicsError> {
        for (i, raw) in self.inner.by_ref() {
            self.line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Ok(t.split_whitespace().collect());
        }
        Err(self.err("unexpected end of file"))
    }

    fn err(&self, msg: &str) -> KinematicsError {
        KinematicsError::Parse {
            line: self.line,
            message: msg.to_string(),
        }
    }

    fn section(&mut self, name: &str, arity: usize) -> Result<Vec<usize>, KinematicsError> {
        let f = self.next_fields()?;
        if f.first() != Some(&name) || f.len() != arity + 1 {
            return Err(self.err(&format!("expected section '{name}'")));
        }
        f[1..]
            .iter()
            .map(|s| s.parse().map_err(|_| self.err("bad section count")))
            .collect()
    }

    fn row<T: std::str::FromStr>(&mut self, n: usize) -> Result<Vec<T>, KinematicsError> {
        let f = self.next_fields()?;
        if f.len() != n {
            return Err(self.err(&format!("expected {n} fields")));
        }
        f.iter()
            .map(|s| s.parse().map_err(|_| self.err(&format!("bad number '{s}'"))))
            .collect()
    }
}

pub fn parse_skin_model(text: &str) -> Result<SkinnedHandModel, KinematicsError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let header = lines.next_fields()?;
    if header.join(" ") != HEADER {
        return Err(lines.err("missing 'SKINMODEL 1' header"));
    }

    let nv = lines.section("vertices", 1)?[0];
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let r: Vec<f64> = lines.row(3)?;
        vertices.push(Vec3::new(r[0], r[1], r[2]));
    }
    let nt = lines.section("triangles", 1)?[0];
    let mut triangles = Vec::with_capacity(nt);
    for _ in 0..nt {
        let r: Vec<usize> = lines.row(3)?;
        triangles.push([r[0], r[1], r[2]]);
    }
    let nj = lines.section("joints", 1)?[0];
    let mut joints = Vec::with_capacity(nj);
    for _ in 0..nj {
        let r: Vec<f64> = lines.row(4)?;
        let parent = if r[0] < 0.0 { None } else { Some(r[0] as usize) };
        joints.push(Joint {
            parent,
            position: Vec3::new(r[1], r[2], r[3]),
        });
    }
    let nw = lines.section("skin_weights", 1)?[0];
    let mut weights = vec![Vec::new(); nv];
    for _ in 0..nw {
        let f = lines.next_fields()?;
        let (v, j, w) = parse_triplet(&f).ok_or_else(|| lines.err("bad skin weight"))?;
        weights.get_mut(v).ok_or_else(|| lines.err("skin weight vertex out of range"))?.push((j, w));
    }
    let dims = lines.section("pose_basis", 2)?;
    if dims[0] != FINGER_DOF || dims[1] != nj {
        return Err(lines.err("pose basis dimensions do not match"));
    }
    let mut basis = vec![vec![Vec3::zeros(); nj]; FINGER_DOF];
    for _ in 0..FINGER_DOF * nj {
        let r: Vec<f64> = lines.row(5)?;
        let (c, j) = (r[0] as usize, r[1] as usize);
        if c >= FINGER_DOF || j >= nj {
            return Err(lines.err("pose basis index out of range"));
        }
        basis[c][j] = Vec3::new(r[2], r[3], r[4]);
    }
    let nr = lines.section("joint_regressor", 1)?[0];
    let mut regressor = vec![Vec::new(); REPORTED_JOINTS];
    for _ in 0..nr {
        let f = lines.next_fields()?;
        let (r, v, w) = parse_triplet(&f).ok_or_else(|| lines.err("bad regressor entry"))?;
        regressor.get_mut(r).ok_or_else(|| lines.err("regressor row out of range"))?.push((v, w));
    }
    if lines.next_fields()? != ["end"] {
        return Err(lines.err("expected 'end'"));
    }

    let mesh = TriMesh::new(vertices, triangles)?;
    SkinnedHandModel::new(mesh, joints, weights, basis, regressor)
}

fn parse_triplet(f: &[&str]) -> Option<(usize, usize, f64)> {
    if f.len() != 3 {
        return None;
    }
    Some((f[0].parse().ok()?, f[1].parse().ok()?, f[2].parse().ok()?))
}

pub fn read_skin_model(path: &Path) -> Result<SkinnedHandModel, KinematicsError> {
    let text = std::fs::read_to_string(path).map_err(|e| KinematicsError::Io(format!("{}: {e}", path.display())))?;
    parse_skin_model(&text)
}

pub fn write_skin_model(path: &Path, model: &SkinnedHandModel) -> Result<(), KinematicsError> {
    std::fs::write(path, to_skin_model_text(model)).map_err(|e| KinematicsError::Io(format!("{}: {e}", path.display())))
}
