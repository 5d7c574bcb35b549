//! Triangle meshes, signed distance queries and vertex sampling.

mod bvh;
mod distance;
mod mesh;
mod obj;
pub mod primitives;
mod sampling;

pub use bvh::{Aabb, Bvh};
pub use distance::{
    closest_point_on_triangle, signed_distance_to_mesh, DistanceMode, Feature, MeshDistance,
    SignedDistanceResult,
};
pub use mesh::{compute_vertex_normals, TriMesh, Vec3, DEGENERATE_AREA};
pub use obj::{parse_obj, read_obj, to_obj, write_obj};
pub use sampling::{sample_vertices, sample_vertices_with};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("empty mesh")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but the mesh has {vertex_count} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("vertex {0} is not referenced by any triangle")]
    UnreferencedVertex(usize),
    #[error("degenerate vertex normal at vertex {0}")]
    DegenerateVertexNormal(usize),
    #[error("non-finite coordinate at vertex {0}")]
    NonFinite(usize),
    #[error("expected {expected} vertices, found {found}")]
    VertexCountMismatch { expected: usize, found: usize },
    #[error("obj line {line}: {message}")]
    Obj { line: usize, message: String },
    #[error("{0}")]
    Io(String),
}
