//! Triangle meshes, their I/O, and the spectral machinery built on top of
//! them (cotangent Laplacian, lumped barycell masses, Laplace-Beltrami
//! eigenbasis).

mod io;
mod laplacian;
pub mod primitives;
mod spectral;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use io::{export_mesh, load_mesh, load_obj_str, load_ply_str};
pub use laplacian::{barycell_areas, cotan_laplacian, SparseSymmetric};
pub use spectral::{spectral_basis, SpectralBasis};

/// Faces with area at or below this are rejected as degenerate.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// An indexed triangle mesh. Construction validates index ranges, face
/// areas, and edge manifoldness, so every `TriMesh` in circulation is valid.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            for &i in face {
                if i >= n {
                    return Err(Error::IndexOutOfRange {
                        face: f,
                        index: i as i64,
                        n_vertices: n,
                    });
                }
            }
        }
        for v in &vertices {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidArgument(
                    "vertex coordinates must be finite".into(),
                ));
            }
        }
        let mesh = TriMesh { vertices, faces };
        for f in 0..mesh.faces.len() {
            let area = mesh.face_area(f);
            if !(area > MIN_FACE_AREA) {
                return Err(Error::DegenerateFace { face: f, area });
            }
        }
        let mut edge_count: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for face in &mesh.faces {
            for (a, b) in face_edges(face) {
                let c = edge_count.entry(ordered(a, b)).or_insert(0);
                *c += 1;
                if *c > 2 {
                    return Err(Error::NonManifoldEdge(a.min(b), a.max(b)));
                }
            }
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f];
        let (pa, pb, pc) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * (pb - pa).cross(&(pc - pa)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Unique undirected edges `(i, j)` with `i < j`, in sorted order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.edge_face_areas().into_keys().collect()
    }

    /// Sum of incident face areas for every undirected edge.
    pub fn edge_face_areas(&self) -> BTreeMap<(usize, usize), f64> {
        let mut out = BTreeMap::new();
        for (f, face) in self.faces.iter().enumerate() {
            let area = self.face_area(f);
            for (a, b) in face_edges(face) {
                *out.entry(ordered(a, b)).or_insert(0.0) += area;
            }
        }
        out
    }

    /// Sorted one-ring neighbour lists.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for (i, j) in self.edges() {
            nb[i].push(j);
            nb[j].push(i);
        }
        for list in &mut nb {
            list.sort_unstable();
        }
        nb
    }

    pub fn bounding_box(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    /// Copy of the mesh translated so its bounding box is centred at the
    /// origin and scaled to a unit bounding-box diagonal.
    pub fn normalized(&self) -> TriMesh {
        let (lo, hi) = self.bounding_box();
        let centre = (lo + hi) * 0.5;
        let scale = 1.0 / (hi - lo).norm();
        self.map_vertices(|v| (v - centre) * scale)
    }

    /// Applies `f` to every vertex. The caller is responsible for not
    /// collapsing faces; the result is not re-validated.
    pub fn map_vertices(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(f).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<TriMesh> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Shape(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(TriMesh {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// SHA-256 over the little-endian vertex coordinates and face indices.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.vertices.len() as u64).to_le_bytes());
        for v in &self.vertices {
            for c in v.iter() {
                h.update(c.to_le_bytes());
            }
        }
        h.update((self.faces.len() as u64).to_le_bytes());
        for f in &self.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn face_edges(f: &[usize; 3]) -> [(usize, usize); 3] {
    [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])]
}
