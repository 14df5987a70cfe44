use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use super::TriMesh;
use crate::error::{Error, Result};

/// Symmetric sparse matrix in compressed-row form. Both triangles are
/// stored, so `row(i)` yields every nonzero of row `i` in column order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymmetric {
    /// Builds from upper-triangle entries `(i, j) -> v` with `i <= j`.
    fn from_upper(n: usize, upper: &BTreeMap<(usize, usize), f64>) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (&(i, j), &v) in upper {
            rows[i].push((j, v));
            if i != j {
                rows[j].push((i, v));
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_by_key(|e| e.0);
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SparseSymmetric {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn mul_dvec(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.mul_vec(x.as_slice()))
    }
}

/// Positive semidefinite cotangent stiffness matrix: off-diagonal entry of
/// edge `(i, j)` is `-(cot a + cot b) / 2`, the diagonal makes rows sum to zero.
pub fn cotan_laplacian(mesh: &TriMesh) -> SparseSymmetric {
    let v = mesh.vertices();
    let mut weights: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for f in mesh.faces() {
        for corner in 0..3 {
            let c = f[corner];
            let a = f[(corner + 1) % 3];
            let b = f[(corner + 2) % 3];
            let ea = v[a] - v[c];
            let eb = v[b] - v[c];
            let cot = ea.dot(&eb) / ea.cross(&eb).norm();
            let key = if a < b { (a, b) } else { (b, a) };
            *weights.entry(key).or_insert(0.0) += 0.5 * cot;
        }
    }
    let mut diag = vec![0.0; mesh.n_vertices()];
    let mut upper = BTreeMap::new();
    for (&(i, j), &w) in &weights {
        upper.insert((i, j), -w);
        diag[i] += w;
        diag[j] += w;
    }
    for (i, d) in diag.into_iter().enumerate() {
        upper.insert((i, i), d);
    }
    SparseSymmetric::from_upper(mesh.n_vertices(), &upper)
}

/// Lumped mass: one third of the area of every incident triangle.
pub fn barycell_areas(mesh: &TriMesh) -> Result<Vec<f64>> {
    let mut areas = vec![0.0; mesh.n_vertices()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let third = mesh.face_area(fi) / 3.0;
        for &k in f {
            areas[k] += third;
        }
    }
    if let Some(k) = areas.iter().position(|&a| a <= 0.0) {
        return Err(Error::IsolatedVertex(k));
    }
    Ok(areas)
}
