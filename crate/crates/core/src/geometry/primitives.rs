//! Closed, outward-wound primitive meshes.

use std::collections::HashMap;

use super::mesh::{TriMesh, Vec3};

/// Axis-aligned unit cube `[0,1]^3` with 8 vertices. Every face diagonal
/// passes through `(0,0,0)` or `(1,1,1)`.
pub fn unit_cube() -> TriMesh {
    box_mesh(Vec3::new(0.5, 0.5, 0.5), 1).transformed(&nalgebra::Matrix3::identity(), &Vec3::repeat(0.5))
}

/// Box centered at the origin with the given half extents; each face is an
/// `n x n` grid.
pub fn box_mesh(half: Vec3, n: usize) -> TriMesh {
    let n = n.max(1);
    // Corners of each face in lattice units, counter-clockwise from outside.
    let faces: [[[usize; 3]; 4]; 6] = [
        [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]],
        [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]],
        [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]],
        [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]],
        [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]],
        [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]],
    ];
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut vid = |p: [usize; 3], vertices: &mut Vec<Vec3>| -> usize {
        *index.entry(p).or_insert_with(|| {
            vertices.push(Vec3::new(
                (2.0 * p[0] as f64 / n as f64 - 1.0) * half.x,
                (2.0 * p[1] as f64 / n as f64 - 1.0) * half.y,
                (2.0 * p[2] as f64 / n as f64 - 1.0) * half.z,
            ));
            vertices.len() - 1
        })
    };
    for corners in faces {
        let q = corners.map(|c| c.map(|x| x * n));
        let lerp = |i: usize, j: usize| -> [usize; 3] {
            let mut p = [0usize; 3];
            for k in 0..3 {
                let base = q[0][k] as isize;
                let du = (q[1][k] as isize - base) / n as isize;
                let dv = (q[3][k] as isize - base) / n as isize;
                p[k] = (base + du * i as isize + dv * j as isize) as usize;
            }
            p
        };
        // Every face lists (0,0,0) or (n,n,n) as q0 or q2, so splitting cells
        // along p00-p11 keeps the face diagonals through those corners.
        for i in 0..n {
            for j in 0..n {
                let p00 = vid(lerp(i, j), &mut vertices);
                let p10 = vid(lerp(i + 1, j), &mut vertices);
                let p11 = vid(lerp(i + 1, j + 1), &mut vertices);
                let p01 = vid(lerp(i, j + 1), &mut vertices);
                triangles.push([p00, p10, p11]);
                triangles.push([p00, p11, p01]);
            }
        }
    }
    TriMesh::new(vertices, triangles).expect("box mesh is valid")
}

/// Subdivided icosahedron projected onto a sphere centered at the origin.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let mut m = |i: usize, j: usize| -> usize {
                *mid.entry((i.min(j), i.max(j))).or_insert_with(|| {
                    vertices.push(((vertices[i] + vertices[j]) * 0.5).normalize());
                    vertices.len() - 1
                })
            };
            let ab = m(a, b);
            let bc = m(b, c);
            let ca = m(c, a);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    TriMesh::new(vertices, faces).expect("icosphere is valid")
}

/// Closed cylinder around the y axis, centered at the origin.
pub fn cylinder(radius: f64, height: f64, segments: usize, rings: usize) -> TriMesh {
    let segments = segments.max(3);
    let rings = rings.max(1);
    let cap_rings = 2usize;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let angle = |k: usize| 2.0 * std::f64::consts::PI * k as f64 / segments as f64;
    let ring_point = |r: f64, y: f64, k: usize| Vec3::new(r * angle(k).cos(), y, -r * angle(k).sin());

    // Side: rings + 1 loops from bottom to top.
    for i in 0..=rings {
        let y = -0.5 * height + height * i as f64 / rings as f64;
        for k in 0..segments {
            vertices.push(ring_point(radius, y, k));
        }
    }
    let side = |i: usize, k: usize| i * segments + k % segments;
    for i in 0..rings {
        for k in 0..segments {
            let (a, b, c, d) = (side(i, k), side(i, k + 1), side(i + 1, k + 1), side(i + 1, k));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    // Caps: concentric loops down to a center vertex.
    for top in [false, true] {
        let y = if top { 0.5 * height } else { -0.5 * height };
        let outer_ring = if top { rings } else { 0 };
        let mut prev: Vec<usize> = (0..segments).map(|k| side(outer_ring, k)).collect();
        for c in 1..=cap_rings {
            let r = radius * (1.0 - c as f64 / (cap_rings + 1) as f64);
            let start = vertices.len();
            for k in 0..segments {
                vertices.push(ring_point(r, y, k));
            }
            let cur: Vec<usize> = (start..start + segments).collect();
            for k in 0..segments {
                let (a, b, c2, d) = (prev[k], prev[(k + 1) % segments], cur[(k + 1) % segments], cur[k]);
                if top {
                    triangles.push([a, b, c2]);
                    triangles.push([a, c2, d]);
                } else {
                    triangles.push([a, c2, b]);
                    triangles.push([a, d, c2]);
                }
            }
            prev = cur;
        }
        let center = vertices.len();
        vertices.push(Vec3::new(0.0, y, 0.0));
        for k in 0..segments {
            let (a, b) = (prev[k], prev[(k + 1) % segments]);
            if top {
                triangles.push([a, b, center]);
            } else {
                triangles.push([a, center, b]);
            }
        }
    }
    TriMesh::new(vertices, triangles).expect("cylinder is valid")
}
