use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{barycell_areas, cotan_laplacian, TriMesh};
use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-14;
const EIGEN_MAX_ITER: usize = 100_000;

/// Truncated Laplace-Beltrami eigenbasis with its lumped mass.
///
/// Columns of `u` are mass-orthonormal (`Uᵀ diag(areas) U = I`) and sorted
/// by nondecreasing eigenvalue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "BasisFile", try_from = "BasisFile")]
pub struct SpectralBasis {
    pub u: DMatrix<f64>,
    pub lambdas: Vec<f64>,
    pub areas: Vec<f64>,
}

impl SpectralBasis {
    pub fn n_vertices(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Keeps the first `n` eigenpairs.
    pub fn truncated(&self, n: usize) -> Result<SpectralBasis> {
        if n == 0 || n > self.n_u() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-function basis to {n}",
                self.n_u()
            )));
        }
        Ok(SpectralBasis {
            u: self.u.columns(0, n).into_owned(),
            lambdas: self.lambdas[..n].to_vec(),
            areas: self.areas.clone(),
        })
    }

    /// Largest absolute entry of `Uᵀ A U - I`.
    pub fn mass_orthonormality_residual(&self) -> f64 {
        let au = DMatrix::from_fn(self.u.nrows(), self.u.ncols(), |k, i| {
            self.areas[k] * self.u[(k, i)]
        });
        let gram = self.u.transpose() * au;
        let n = gram.nrows();
        (gram - DMatrix::identity(n, n)).amax()
    }
}

#[derive(Serialize, Deserialize)]
struct BasisFile {
    n_vertices: usize,
    n_u: usize,
    lambdas: Vec<f64>,
    areas: Vec<f64>,
    /// Row-major, one row per vertex.
    u: Vec<Vec<f64>>,
}

impl From<SpectralBasis> for BasisFile {
    fn from(b: SpectralBasis) -> Self {
        BasisFile {
            n_vertices: b.n_vertices(),
            n_u: b.n_u(),
            u: b.u.row_iter().map(|r| r.iter().copied().collect()).collect(),
            lambdas: b.lambdas,
            areas: b.areas,
        }
    }
}

impl TryFrom<BasisFile> for SpectralBasis {
    type Error = Error;

    fn try_from(f: BasisFile) -> Result<Self> {
        if f.u.len() != f.n_vertices
            || f.u.iter().any(|r| r.len() != f.n_u)
            || f.lambdas.len() != f.n_u
            || f.areas.len() != f.n_vertices
        {
            return Err(Error::Shape("inconsistent basis file".into()));
        }
        Ok(SpectralBasis {
            u: DMatrix::from_fn(f.n_vertices, f.n_u, |k, i| f.u[k][i]),
            lambdas: f.lambdas,
            areas: f.areas,
        })
    }
}

/// Solves `L u = λ A u` for the `n_u` smallest eigenpairs, where `L` is the
/// cotangent stiffness and `A` the diagonal barycell mass.
///
/// The generalized problem is reduced to the symmetric matrix
/// `A^{-1/2} L A^{-1/2}` and solved densely. Each eigenvector is signed so
/// that its largest-magnitude entry is positive.
pub fn spectral_basis(mesh: &TriMesh, n_u: usize) -> Result<SpectralBasis> {
    let k = mesh.n_vertices();
    if n_u == 0 || n_u > k {
        return Err(Error::InvalidArgument(format!(
            "n_u must be in [1, {k}], got {n_u}"
        )));
    }
    let areas = barycell_areas(mesh)?;
    let lap = cotan_laplacian(mesh);
    let inv_sqrt: Vec<f64> = areas.iter().map(|a| 1.0 / a.sqrt()).collect();

    let mut sym = DMatrix::zeros(k, k);
    for i in 0..k {
        for (j, v) in lap.row(i) {
            sym[(i, j)] = inv_sqrt[i] * v * inv_sqrt[j];
        }
    }
    let eig = sym
        .try_symmetric_eigen(EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or_else(|| {
            Error::Eigensolver(format!(
                "dense symmetric QR on a {k}x{k} matrix exceeded {EIGEN_MAX_ITER} iterations (eps {EIGEN_EPS:e})"
            ))
        })?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut u = DMatrix::zeros(k, n_u);
    let mut lambdas = Vec::with_capacity(n_u);
    for (col, &idx) in order.iter().take(n_u).enumerate() {
        let y = eig.eigenvectors.column(idx);
        let mut v = DVector::from_fn(k, |r, _| y[r] * inv_sqrt[r]);
        // Renormalise in the mass inner product to absorb roundoff.
        let norm = v
            .iter()
            .zip(&areas)
            .map(|(x, a)| a * x * x)
            .sum::<f64>()
            .sqrt();
        v /= norm;
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        u.set_column(col, &v);
        lambdas.push(eig.eigenvalues[idx].max(0.0));
    }
    Ok(SpectralBasis { u, lambdas, areas })
}
