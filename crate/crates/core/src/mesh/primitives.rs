//! Procedural test and demo meshes.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::TriMesh;

/// Regular icosahedron inscribed in the unit sphere.
pub fn icosahedron() -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let vertices = raw.iter().map(|p| Vector3::from(*p).normalize()).collect();
    let faces = vec![
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
    TriMesh::new(vertices, faces).expect("icosahedron is valid")
}

/// Unit icosphere: `levels` rounds of 1-to-4 midpoint subdivision of the
/// icosahedron, with new vertices pushed onto the sphere. Level 3 has 642
/// vertices and 1280 faces.
pub fn icosphere(levels: usize) -> TriMesh {
    let base = icosahedron();
    let mut vertices = base.vertices().to_vec();
    let mut faces = base.faces().to_vec();
    for _ in 0..levels {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for e in 0..3 {
                let (a, b) = (f[e], f[(e + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[e] = *midpoint.entry(key).or_insert_with(|| {
                    vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                    vertices.len() - 1
                });
            }
            next.push([f[0], mid[0], mid[2]]);
            next.push([f[1], mid[1], mid[0]]);
            next.push([f[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        faces = next;
    }
    TriMesh::new(vertices, faces).expect("icosphere is valid")
}

/// Closed cylinder along the z axis, centred at the origin, with fan caps.
/// Vertex layout: `n_rings` rings of `n_around` vertices from `z = -length/2`
/// upwards, then the bottom and top cap centres.
pub fn cylinder(radius: f64, length: f64, n_around: usize, n_rings: usize) -> TriMesh {
    assert!(n_around >= 3 && n_rings >= 2);
    let mut vertices = Vec::with_capacity(n_around * n_rings + 2);
    for j in 0..n_rings {
        let z = -0.5 * length + length * j as f64 / (n_rings - 1) as f64;
        for i in 0..n_around {
            let th = std::f64::consts::TAU * i as f64 / n_around as f64;
            vertices.push(Vector3::new(radius * th.cos(), radius * th.sin(), z));
        }
    }
    let bottom = vertices.len();
    vertices.push(Vector3::new(0.0, 0.0, -0.5 * length));
    let top = vertices.len();
    vertices.push(Vector3::new(0.0, 0.0, 0.5 * length));

    let idx = |j: usize, i: usize| j * n_around + i % n_around;
    let mut faces = Vec::new();
    for j in 0..n_rings - 1 {
        for i in 0..n_around {
            let (a, b, c, d) = (idx(j, i), idx(j, i + 1), idx(j + 1, i + 1), idx(j + 1, i));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for i in 0..n_around {
        faces.push([bottom, idx(0, i + 1), idx(0, i)]);
        faces.push([top, idx(n_rings - 1, i), idx(n_rings - 1, i + 1)]);
    }
    TriMesh::new(vertices, faces).expect("cylinder is valid")
}

/// Labels vertices by which of `n_segments` equal slabs along z they fall in.
pub fn axial_labels(mesh: &TriMesh, n_segments: usize) -> Vec<usize> {
    let (lo, hi) = mesh.bounding_box();
    let span = hi.z - lo.z;
    mesh.vertices()
        .iter()
        .map(|v| {
            let t = (v.z - lo.z) / span * n_segments as f64;
            (t.floor().max(0.0) as usize).min(n_segments - 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts() {
        for (level, k) in [(0, 12), (1, 42), (2, 162), (3, 642)] {
            let m = icosphere(level);
            assert_eq!(m.n_vertices(), k);
            assert_eq!(m.n_faces(), 2 * k - 4);
        }
    }

    #[test]
    fn icosphere_faces_point_outwards() {
        let m = icosphere(2);
        for f in m.faces() {
            let [a, b, c] = f.map(|i| m.vertices()[i]);
            assert!((b - a).cross(&(c - a)).dot(&(a + b + c)) > 0.0);
        }
    }

    #[test]
    fn cylinder_is_closed_and_outward() {
        let m = cylinder(0.15, 1.0, 25, 24);
        assert_eq!(m.n_vertices(), 602);
        // closed genus-0 surface
        assert_eq!(m.n_faces(), 2 * m.n_vertices() - 4);
        for f in m.faces() {
            let [a, b, c] = f.map(|i| m.vertices()[i]);
            assert!((b - a).cross(&(c - a)).dot(&(a + b + c)) > 0.0);
        }
    }

    #[test]
    fn axial_labels_split_evenly() {
        let m = cylinder(0.15, 1.0, 25, 24);
        let l = axial_labels(&m, 2);
        let ones = l.iter().filter(|&&x| x == 1).count();
        assert_eq!(ones, m.n_vertices() / 2);
    }
}
