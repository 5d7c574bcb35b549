//! Signed distance from points to a triangle mesh.
//!
//! The unsigned part is the exact point-triangle distance to the nearest
//! triangle; the sign comes from angle-weighted pseudo-normals so that it is
//! well defined when the closest point lies on an edge or a vertex. Negative
//! distances mean the query point is behind the surface (penetrating).

use std::collections::HashMap;

use super::bvh::{Aabb, Bvh};
use super::mesh::{TriMesh, Vec3, DEGENERATE_AREA};
use super::GeometryError;

/// Which part of the closest triangle the closest point lies on.
/// Local edge `k` joins corners `k` and `(k + 1) % 3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Face,
    Edge(u8),
    Vertex(u8),
}

/// How the distance to the other body is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Closest point on the triangulated surface.
    #[default]
    Surface,
    /// Closest mesh vertex, signed by that vertex's normal.
    Vertices,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedDistanceResult {
    /// Signed distance in meters, negative inside.
    pub distance: f64,
    pub closest_point: Vec3,
    pub closest_triangle: usize,
    /// Weights of the closest triangle's corners that reproduce `closest_point`.
    pub barycentric: [f64; 3],
    pub feature: Feature,
    /// Derivative of `distance` with respect to the query point. The
    /// derivative with respect to corner `k` of the closest triangle is
    /// `-barycentric[k] * gradient`.
    pub gradient: Vec3,
}

/// Precomputed acceleration structure and pseudo-normals for one mesh pose.
#[derive(Debug, Clone)]
pub struct MeshDistance {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    face_normals: Vec<Vec3>,
    edge_normals: Vec<[Vec3; 3]>,
    vertex_pseudo_normals: Vec<Vec3>,
    vertex_normals: Vec<Vec3>,
    /// One non-degenerate triangle incident to each vertex, with the corner slot.
    vertex_triangle: Vec<(usize, u8)>,
    mode: DistanceMode,
    bvh: Bvh,
}

impl MeshDistance {
    pub fn new(mesh: &TriMesh) -> Result<Self, GeometryError> {
        Self::with_mode(mesh, DistanceMode::Surface)
    }

    pub fn with_mode(mesh: &TriMesh, mode: DistanceMode) -> Result<Self, GeometryError> {
        Self::from_parts(mesh.vertices(), mesh.triangles(), mesh.normals(), mode)
    }

    /// Builds from raw buffers. `vertex_normals` is only used in
    /// [`DistanceMode::Vertices`].
    pub fn from_parts(
        vertices: &[Vec3],
        triangles: &[[usize; 3]],
        vertex_normals: &[Vec3],
        mode: DistanceMode,
    ) -> Result<Self, GeometryError> {
        let n = vertices.len();
        let mut face_normals = Vec::with_capacity(triangles.len());
        let mut vertex_pseudo = vec![Vec3::zeros(); n];
        let mut edge_acc: HashMap<(usize, usize), Vec3> = HashMap::new();
        let mut vertex_triangle = vec![(usize::MAX, 0u8); n];
        let mut live = Vec::new();

        for (t, tri) in triangles.iter().enumerate() {
            let p = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
            let area_vec = (p[1] - p[0]).cross(&(p[2] - p[0]));
            let area = 0.5 * area_vec.norm();
            if area < DEGENERATE_AREA {
                face_normals.push(Vec3::zeros());
                continue;
            }
            let nf = area_vec / (2.0 * area);
            face_normals.push(nf);
            live.push(t);
            for k in 0..3 {
                let e1 = (p[(k + 1) % 3] - p[k]).normalize();
                let e2 = (p[(k + 2) % 3] - p[k]).normalize();
                let angle = e1.dot(&e2).clamp(-1.0, 1.0).acos();
                vertex_pseudo[tri[k]] += angle * nf;
                if vertex_triangle[tri[k]].0 == usize::MAX {
                    vertex_triangle[tri[k]] = (t, k as u8);
                }
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_acc.entry((a.min(b), a.max(b))).or_insert_with(Vec3::zeros) += nf;
            }
        }
        if live.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        let edge_normals = triangles
            .iter()
            .map(|tri| {
                let mut e = [Vec3::zeros(); 3];
                for k in 0..3 {
                    let (a, b) = (tri[k], tri[(k + 1) % 3]);
                    e[k] = edge_acc
                        .get(&(a.min(b), a.max(b)))
                        .copied()
                        .unwrap_or_else(Vec3::zeros);
                }
                e
            })
            .collect();

        let bvh = match mode {
            DistanceMode::Surface => {
                let boxes: Vec<Aabb> = (0..triangles.len())
                    .map(|t| {
                        if face_normals[t] == Vec3::zeros() {
                            // Degenerate: an empty box is never visited.
                            Aabb::empty()
                        } else {
                            Aabb::from_points(triangles[t].iter().map(|&i| &vertices[i]))
                        }
                    })
                    .collect();
                Bvh::build(&boxes)
            }
            DistanceMode::Vertices => {
                if vertex_normals.len() != n {
                    return Err(GeometryError::VertexCountMismatch {
                        expected: n,
                        found: vertex_normals.len(),
                    });
                }
                let boxes: Vec<Aabb> = (0..n)
                    .map(|i| {
                        if vertex_triangle[i].0 == usize::MAX {
                            Aabb::empty()
                        } else {
                            Aabb {
                                min: vertices[i],
                                max: vertices[i],
                            }
                        }
                    })
                    .collect();
                Bvh::build(&boxes)
            }
        };

        Ok(Self {
            vertices: vertices.to_vec(),
            triangles: triangles.to_vec(),
            face_normals,
            edge_normals,
            vertex_pseudo_normals: vertex_pseudo,
            vertex_normals: vertex_normals.to_vec(),
            vertex_triangle,
            mode,
            bvh,
        })
    }

    pub fn mode(&self) -> DistanceMode {
        self.mode
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn query(&self, p: &Vec3) -> SignedDistanceResult {
        match self.mode {
            DistanceMode::Surface => self.query_surface(p),
            DistanceMode::Vertices => self.query_vertices(p),
        }
    }

    fn query_surface(&self, p: &Vec3) -> SignedDistanceResult {
        let (t, _) = self
            .bvh
            .nearest(p, |t| {
                let [a, b, c] = self.corners(t);
                let (bary, _) = closest_point_on_triangle(p, &a, &b, &c);
                let q = a * bary[0] + b * bary[1] + c * bary[2];
                (p - q).norm_squared()
            })
            .expect("non-empty mesh");
        let [a, b, c] = self.corners(t);
        let (bary, feature) = closest_point_on_triangle(p, &a, &b, &c);
        let closest = a * bary[0] + b * bary[1] + c * bary[2];
        let pseudo = match feature {
            Feature::Face => self.face_normals[t],
            Feature::Edge(k) => self.edge_normals[t][k as usize],
            Feature::Vertex(k) => self.vertex_pseudo_normals[self.triangles[t][k as usize]],
        };
        self.finish(p, closest, pseudo, t, bary, feature)
    }

    fn query_vertices(&self, p: &Vec3) -> SignedDistanceResult {
        let (v, _) = self
            .bvh
            .nearest(p, |i| (self.vertices[i] - p).norm_squared())
            .expect("non-empty mesh");
        let (t, slot) = self.vertex_triangle[v];
        let mut bary = [0.0; 3];
        bary[slot as usize] = 1.0;
        self.finish(
            p,
            self.vertices[v],
            self.vertex_normals[v],
            t,
            bary,
            Feature::Vertex(slot),
        )
    }

    fn finish(
        &self,
        p: &Vec3,
        closest: Vec3,
        pseudo: Vec3,
        t: usize,
        bary: [f64; 3],
        feature: Feature,
    ) -> SignedDistanceResult {
        let delta = p - closest;
        let dist = delta.norm();
        let sign = if delta.dot(&pseudo) < 0.0 { -1.0 } else { 1.0 };
        let gradient = if dist > 1e-14 {
            delta * (sign / dist)
        } else {
            pseudo.try_normalize(0.0).unwrap_or_else(Vec3::zeros)
        };
        SignedDistanceResult {
            distance: sign * dist,
            closest_point: closest,
            closest_triangle: t,
            barycentric: bary,
            feature,
            gradient,
        }
    }

    fn corners(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }
}

/// Signed distance from `point` to `mesh` (surface mode).
pub fn signed_distance_to_mesh(point: &Vec3, mesh: &TriMesh) -> Result<SignedDistanceResult, GeometryError> {
    Ok(MeshDistance::new(mesh)?.query(point))
}

/// Closest point on triangle `abc` to `p` as barycentric weights, together
/// with the feature it lies on.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> ([f64; 3], Feature) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ([1.0, 0.0, 0.0], Feature::Vertex(0));
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ([0.0, 1.0, 0.0], Feature::Vertex(1));
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return ([1.0 - v, v, 0.0], Feature::Edge(0));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ([0.0, 0.0, 1.0], Feature::Vertex(2));
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return ([1.0 - w, 0.0, w], Feature::Edge(2));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return ([0.0, 1.0 - w, w], Feature::Edge(1));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    ([1.0 - v - w, v, w], Feature::Face)
}
