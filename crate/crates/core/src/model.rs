//! The articulated shape model: a smooth soft part segmentation expressed
//! in the Laplace-Beltrami basis, linear blend skinning of per-part rigid
//! transforms, and LBO-parameterised linear blendshapes.

use std::sync::Arc;

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lie::{compose_vjp, se3_exp, se3_exp_jacobian, RigidTransform, TransformGrad, Twist};
use crate::mesh::{SpectralBasis, TriMesh};

pub const DEFAULT_N_PARTS: usize = 10;
pub const DEFAULT_SIGMA_BAR: f64 = 32.0;
pub const DEFAULT_N_U: usize = 64;

/// Segmentation weights `W` (`N_u × M`) and the twist logs of the inverse
/// rest poses (`M × 6`), over a shared spectral basis.
#[derive(Debug, Clone)]
pub struct PartModel {
    pub w: DMatrix<f64>,
    pub rest_logs: DMatrix<f64>,
    pub basis: Arc<SpectralBasis>,
}

impl PartModel {
    pub fn new(w: DMatrix<f64>, rest_logs: DMatrix<f64>, basis: Arc<SpectralBasis>) -> Result<Self> {
        if w.nrows() != basis.n_u() {
            return Err(Error::Shape(format!(
                "W has {} rows but the basis has {} functions",
                w.nrows(),
                basis.n_u()
            )));
        }
        if rest_logs.shape() != (w.ncols(), 6) {
            return Err(Error::Shape(format!(
                "rest_logs must be {}x6, got {:?}",
                w.ncols(),
                rest_logs.shape()
            )));
        }
        Ok(PartModel { w, rest_logs, basis })
    }

    pub fn n_parts(&self) -> usize {
        self.w.ncols()
    }

    /// `g_0m⁻¹ = exp(rest_logs_m)`.
    pub fn rest_inverse(&self, m: usize) -> RigidTransform {
        se3_exp(&Twist::from_slice(&row6(&self.rest_logs, m)))
    }
}

pub(crate) fn row6(m: &DMatrix<f64>, r: usize) -> [f64; 6] {
    std::array::from_fn(|c| m[(r, c)])
}

/// `W_im ~ N(0, σ_i²)` with `σ_i = exp(-i/σ̄)/√M`, `i` the 0-based
/// eigenfunction rank; rest logs start at zero (identity rest poses).
pub fn init_part_model<R: Rng + ?Sized>(
    basis: Arc<SpectralBasis>,
    m: usize,
    sigma_bar: f64,
    rng: &mut R,
) -> Result<PartModel> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one part".into()));
    }
    if !(sigma_bar > 0.0) {
        return Err(Error::InvalidArgument("sigma_bar must be positive".into()));
    }
    let w = init_segmentation_weights(basis.n_u(), m, sigma_bar, rng);
    PartModel::new(w, DMatrix::zeros(m, 6), basis)
}

pub fn init_segmentation_weights<R: Rng + ?Sized>(
    n_u: usize,
    m: usize,
    sigma_bar: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let inv_sqrt_m = 1.0 / (m as f64).sqrt();
    // Row-major draw order so the sample does not depend on storage layout.
    let mut w = DMatrix::zeros(n_u, m);
    for i in 0..n_u {
        let std = (-(i as f64) / sigma_bar).exp() * inv_sqrt_m;
        for j in 0..m {
            w[(i, j)] = std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    w
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let mx = row.max();
        row.apply(|v| *v = (*v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Pulls `dL/dP` back to the logits of a row-wise softmax.
pub fn softmax_rows_backward(p: &DMatrix<f64>, dp: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(p.nrows(), p.ncols());
    for k in 0..p.nrows() {
        let dot = p.row(k).dot(&dp.row(k));
        for m in 0..p.ncols() {
            out[(k, m)] = p[(k, m)] * (dp[(k, m)] - dot);
        }
    }
    out
}

/// `P = softmax(U W)` over the part axis.
pub fn part_segmentation(model: &PartModel) -> DMatrix<f64> {
    softmax_rows(&(&model.basis.u * &model.w))
}

/// Gradient of a loss with respect to `W` given its gradient on `P`.
pub fn part_segmentation_backward(basis: &SpectralBasis, p: &DMatrix<f64>, dp: &DMatrix<f64>) -> DMatrix<f64> {
    basis.u.transpose() * softmax_rows_backward(p, dp)
}

/// Twists `h_0..h_M` (camera first) and optional blendshape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub twists: Vec<Twist>,
    pub blend_coeffs: Option<Vec<f64>>,
}

impl PoseParams {
    pub fn identity(n_parts: usize) -> Self {
        PoseParams {
            twists: vec![Twist::zero(); n_parts + 1],
            blend_coeffs: None,
        }
    }

    pub fn camera(&self) -> RigidTransform {
        se3_exp(&self.twists[0])
    }

    pub fn n_parts(&self) -> usize {
        self.twists.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .twists
            .iter()
            .flat_map(|t| t.to_array())
            .chain(self.blend_coeffs.iter().flatten().copied())
            .all(f64::is_finite);
        if !finite || self.twists.is_empty() {
            return Err(Error::InvalidArgument("pose parameters must be finite".into()));
        }
        Ok(())
    }
}

/// `D` blendshapes, each a linear image of the spectral basis: row `3d + c`
/// of `w_b` holds the basis coefficients of coordinate `c` of shape `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeModel {
    pub w_b: DMatrix<f64>,
}

impl BlendshapeModel {
    pub fn new(w_b: DMatrix<f64>) -> Result<Self> {
        if w_b.nrows() % 3 != 0 || w_b.nrows() == 0 {
            return Err(Error::Shape(format!(
                "W_b needs 3D rows, got {}",
                w_b.nrows()
            )));
        }
        if !w_b.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("W_b must be finite".into()));
        }
        Ok(BlendshapeModel { w_b })
    }

    pub fn zeros(n_shapes: usize, n_u: usize) -> Self {
        BlendshapeModel {
            w_b: DMatrix::zeros(3 * n_shapes, n_u),
        }
    }

    pub fn n_shapes(&self) -> usize {
        self.w_b.nrows() / 3
    }
}

/// Per-vertex displacement `(α ⊗ I₃) W_b Uᵀ`, returned as `K` rows.
pub fn blend_displacement(basis: &SpectralBasis, w_b: &DMatrix<f64>, alpha: &[f64]) -> Result<Vec<Vector3<f64>>> {
    let d = w_b.nrows() / 3;
    if alpha.len() != d || w_b.ncols() != basis.n_u() {
        return Err(Error::Shape(format!(
            "alpha has {} entries, W_b is {:?}, basis has {} functions",
            alpha.len(),
            w_b.shape(),
            basis.n_u()
        )));
    }
    // coeffs (3 × N_u) = Σ_d α_d W_b[3d..3d+3]
    let mut coeffs = DMatrix::zeros(3, w_b.ncols());
    for (s, &a) in alpha.iter().enumerate() {
        coeffs += w_b.rows(3 * s, 3) * a;
    }
    let disp = &basis.u * coeffs.transpose();
    Ok(disp
        .row_iter()
        .map(|r| Vector3::new(r[0], r[1], r[2]))
        .collect())
}

/// Gradients of `blend_displacement` with respect to `W_b` and `α`.
pub fn blend_displacement_backward(
    basis: &SpectralBasis,
    w_b: &DMatrix<f64>,
    alpha: &[f64],
    d_disp: &[Vector3<f64>],
) -> (DMatrix<f64>, Vec<f64>) {
    let dd = DMatrix::from_fn(d_disp.len(), 3, |k, c| d_disp[k][c]);
    // d coeffs (3 × N_u) = ddᵀ U
    let d_coeffs = dd.transpose() * &basis.u;
    let mut d_wb = DMatrix::zeros(w_b.nrows(), w_b.ncols());
    let mut d_alpha = vec![0.0; alpha.len()];
    for (s, &a) in alpha.iter().enumerate() {
        d_wb.rows_mut(3 * s, 3).copy_from(&(&d_coeffs * a));
        d_alpha[s] = w_b.rows(3 * s, 3).component_mul(&d_coeffs).sum();
    }
    (d_wb, d_alpha)
}

/// Template plus blendshape displacement. This is both the no-parts
/// baseline's posing model and the body-type stage of the blendshape
/// variant.
pub fn skin_linear(
    template: &TriMesh,
    basis: &SpectralBasis,
    bs: &BlendshapeModel,
    alpha: &[f64],
) -> Result<Vec<Vector3<f64>>> {
    if template.n_vertices() != basis.n_vertices() {
        return Err(Error::Shape("template and basis disagree on K".into()));
    }
    let disp = blend_displacement(basis, &bs.w_b, alpha)?;
    Ok(template
        .vertices()
        .iter()
        .zip(disp)
        .map(|(v, d)| v + d)
        .collect())
}

/// Composite per-part transforms `A_m = g_0m⁻¹ then g_m`.
pub fn part_transforms(model: &PartModel, pose: &PoseParams) -> Vec<RigidTransform> {
    (0..model.n_parts())
        .map(|m| model.rest_inverse(m).compose(&se3_exp(&pose.twists[m + 1])))
        .collect()
}

/// `X_k = Σ_m P_km A_m(V_k)`.
pub fn skin_points(vertices: &[Vector3<f64>], p: &DMatrix<f64>, transforms: &[RigidTransform]) -> Vec<Vector3<f64>> {
    vertices
        .iter()
        .enumerate()
        .map(|(k, v)| {
            transforms
                .iter()
                .enumerate()
                .map(|(m, a)| a.apply(v) * p[(k, m)])
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SkinGrad {
    pub d_p: DMatrix<f64>,
    pub d_transforms: Vec<TransformGrad>,
    pub d_vertices: Vec<Vector3<f64>>,
}

pub fn skin_points_backward(
    vertices: &[Vector3<f64>],
    p: &DMatrix<f64>,
    transforms: &[RigidTransform],
    d_x: &[Vector3<f64>],
) -> SkinGrad {
    let (k_n, m_n) = p.shape();
    let mut d_p = DMatrix::zeros(k_n, m_n);
    let mut d_transforms = vec![TransformGrad::zero(); m_n];
    let mut d_vertices = vec![Vector3::zeros(); k_n];
    for k in 0..k_n {
        let v = &vertices[k];
        let dx = &d_x[k];
        for (m, a) in transforms.iter().enumerate() {
            let pk = p[(k, m)];
            d_p[(k, m)] = a.apply(v).dot(dx);
            d_transforms[m].add_point(v, &(dx * pk));
            d_vertices[k] += a.rotation * dx * pk;
        }
    }
    SkinGrad {
        d_p,
        d_transforms,
        d_vertices,
    }
}

/// Linear blend skinning in the object frame; the camera twist `h_0` is not
/// applied here. With blendshape coefficients and a `BlendshapeModel`, the
/// template is deformed first and then posed.
pub fn skin(
    template: &TriMesh,
    model: &PartModel,
    pose: &PoseParams,
    blendshapes: Option<&BlendshapeModel>,
) -> Result<Vec<Vector3<f64>>> {
    if pose.n_parts() != model.n_parts() {
        return Err(Error::Shape(format!(
            "pose has {} part twists, model has {} parts",
            pose.n_parts(),
            model.n_parts()
        )));
    }
    if template.n_vertices() != model.basis.n_vertices() {
        return Err(Error::Shape("template and basis disagree on K".into()));
    }
    let base = match (blendshapes, &pose.blend_coeffs) {
        (Some(bs), Some(alpha)) => skin_linear(template, &model.basis, bs, alpha)?,
        _ => template.vertices().to_vec(),
    };
    let p = part_segmentation(model);
    Ok(skin_points(&base, &p, &part_transforms(model, pose)))
}

/// Backward pass of the composite transform `A_m = exp(rest_m) then exp(h_m)`
/// onto the two twists.
pub fn part_transform_vjp(rest_log: &[f64; 6], twist: &Twist, d: &TransformGrad) -> ([f64; 6], [f64; 6]) {
    let (rest, rest_jac) = se3_exp_jacobian(&Twist::from_slice(rest_log));
    let (g, g_jac) = se3_exp_jacobian(twist);
    let (d_rest, d_g) = compose_vjp(&rest, &g, d);
    (
        rest_jac.vjp(&d_rest.rotation, &d_rest.translation),
        g_jac.vjp(&d_g.rotation, &d_g.translation),
    )
}
