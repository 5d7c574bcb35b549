//! Wavefront OBJ subset: `v x y z` and triangular `f` lines.

use std::fmt::Write as _;
use std::path::Path;

use super::mesh::{TriMesh, Vec3};
use super::GeometryError;

/// Parses `v` and `f` records. Face entries may carry `/vt/vn` suffixes,
/// which are ignored; negative (relative) indices are supported. Faces with
/// more than three vertices are rejected.
pub fn parse_obj(text: &str) -> Result<TriMesh, GeometryError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        let err = |msg: &str| GeometryError::Obj {
            line: lineno + 1,
            message: msg.to_string(),
        };
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|_| err("bad vertex coordinate")))
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 {
                    return Err(err("vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|s| {
                        let head = s.split('/').next().unwrap_or("");
                        let i: i64 = head.parse().map_err(|_| err("bad face index"))?;
                        let n = vertices.len() as i64;
                        let resolved = if i > 0 { i - 1 } else { n + i };
                        if i == 0 || resolved < 0 {
                            return Err(err("face index out of range"));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_, _>>()?;
                match idx.len() {
                    3 => triangles.push([idx[0], idx[1], idx[2]]),
                    n if n > 3 => return Err(err("only triangular faces are supported")),
                    _ => return Err(err("face needs three vertices")),
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles)
}

pub fn read_obj(path: &Path) -> Result<TriMesh, GeometryError> {
    let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Io(format!("{}: {e}", path.display())))?;
    parse_obj(&text)
}

pub fn to_obj(mesh: &TriMesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        // {:e} round-trips f64 exactly.
        let _ = writeln!(out, "v {:e} {:e} {:e}", v.x, v.y, v.z);
    }
    for t in mesh.triangles() {
        let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    out
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<(), GeometryError> {
    std::fs::write(path, to_obj(mesh)).map_err(|e| GeometryError::Io(format!("{}: {e}", path.display())))
}
