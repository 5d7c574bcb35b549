use nalgebra::{Matrix3, Vector3};

use super::GeometryError;

pub type Vec3 = Vector3<f64>;

/// Triangles with less area than this are ignored by normal estimation and
/// distance queries.
pub const DEGENERATE_AREA: f64 = 1e-12;

/// Indexed triangle mesh with cached per-vertex unit normals.
///
/// Positions are in meters. Normals follow the triangle winding
/// (counter-clockwise seen from outside) and are recomputed whenever the
/// vertex positions change.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
}

impl TriMesh {
    /// Validates the index buffer and computes vertex normals.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, GeometryError> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(GeometryError::IndexOutOfRange {
                    triangle: t,
                    index: bad,
                    vertex_count: n,
                });
            }
        }
        if let Some(v) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(v));
        }
        let normals = compute_vertex_normals(&vertices, &triangles)?;
        Ok(Self {
            vertices,
            triangles,
            normals,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    /// Replaces the vertex positions (same topology) and refreshes normals.
    pub fn set_vertices(&mut self, vertices: Vec<Vec3>) -> Result<(), GeometryError> {
        if vertices.len() != self.vertices.len() {
            return Err(GeometryError::VertexCountMismatch {
                expected: self.vertices.len(),
                found: vertices.len(),
            });
        }
        self.normals = compute_vertex_normals(&vertices, &self.triangles)?;
        self.vertices = vertices;
        Ok(())
    }

    /// Applies `v -> R v + t`. Normals are rotated rather than recomputed.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3) -> TriMesh {
        TriMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| rotation * v + translation)
                .collect(),
            triangles: self.triangles.clone(),
            normals: self.normals.iter().map(|n| rotation * n).collect(),
        }
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.vertices.iter().sum();
        sum / self.vertices.len() as f64
    }

    /// Unnormalized face normal (twice the area vector).
    pub fn face_area_vector(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t];
        (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]))
    }
}

/// Area-weighted vertex normals.
///
/// Degenerate triangles contribute nothing. A vertex that is referenced by no
/// triangle, or only by degenerate ones, is an error.
pub fn compute_vertex_normals(
    vertices: &[Vec3],
    triangles: &[[usize; 3]],
) -> Result<Vec<Vec3>, GeometryError> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    let mut referenced = vec![false; vertices.len()];
    for tri in triangles {
        let [a, b, c] = *tri;
        for &i in tri {
            referenced[i] = true;
        }
        let area_vec = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        if 0.5 * area_vec.norm() < DEGENERATE_AREA {
            continue;
        }
        // |area_vec| = 2 * area, so the sum is area weighted.
        for &i in tri {
            acc[i] += area_vec;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, n)| {
            if !referenced[i] {
                return Err(GeometryError::UnreferencedVertex(i));
            }
            let len = n.norm();
            if len == 0.0 || !len.is_finite() {
                Err(GeometryError::DegenerateVertexNormal(i))
            } else {
                Ok(n / len)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    #[test]
    fn flat_square_normals_face_up() {
        for n in square().normals() {
            assert!((n - Vec3::z()).norm() < 1e-12);
        }
    }

    #[test]
    fn single_triangle_normals_equal_face_normal() {
        let m = TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        for n in m.normals() {
            assert!((n - Vec3::x()).norm() < 1e-12);
        }
    }

    #[test]
    fn unit_cube_corner_normal() {
        // Face diagonals all run through (0,0,0) or (1,1,1) so both corners
        // receive the same area from each incident face.
        let cube = crate::geometry::primitives::unit_cube();
        let corner = cube
            .vertices()
            .iter()
            .position(|v| (v - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12)
            .unwrap();
        let expected = Vec3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
        assert!((cube.normals()[corner] - expected).norm() < 1e-6);
    }

    #[test]
    fn rejects_bad_index() {
        let err = TriMesh::new(vec![Vec3::zeros(); 3], vec![[0, 1, 3]]).unwrap_err();
        assert!(matches!(err, GeometryError::IndexOutOfRange { index: 3, .. }));
    }

    #[test]
    fn all_degenerate_vertex_is_error() {
        let err = TriMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(2.0, 0.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "degenerate vertex normal at vertex 0");
    }

    #[test]
    fn degenerate_triangle_is_skipped() {
        let mut v = square().vertices().to_vec();
        v.push(Vec3::new(2.0, 0.0, 0.0));
        // Sliver [1, 4, 1'] has zero area and must not disturb vertex 1.
        let m = TriMesh::new(v, vec![[0, 1, 2], [0, 2, 3], [1, 4, 1]]);
        // vertex 4 only has the degenerate triangle
        assert!(matches!(m, Err(GeometryError::DegenerateVertexNormal(4))));
    }

    #[test]
    fn transform_rotates_normals() {
        let r = crate::kinematics::axis_angle_to_matrix(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        let m = square().transformed(&r, &Vec3::new(0.0, 0.1, 0.0));
        for n in m.normals() {
            assert!((n - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
        }
    }
}
