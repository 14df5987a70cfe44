//! Training objectives and their gradients.
//!
//! Every loss comes as a plain value function plus a `*_grad` variant that
//! returns the value together with the gradient on each input it depends on.

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{random_rotation, RigidTransform, TransformGrad};
use crate::mesh::TriMesh;

/// 2D keypoints in zero-centred image units with visibility flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub y: Vec<Vector2<f64>>,
    pub z: Vec<bool>,
}

impl KeypointSet {
    pub fn new(y: Vec<Vector2<f64>>, z: Vec<bool>) -> Result<Self> {
        let kp = KeypointSet { y, z };
        kp.validate()?;
        Ok(kp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.z.len() {
            return Err(Error::Shape(format!(
                "{} keypoints but {} visibility flags",
                self.y.len(),
                self.z.len()
            )));
        }
        let visible = self.n_visible();
        if visible == 0 {
            return Err(Error::NoVisibleKeypoints);
        }
        if visible < 3 {
            return Err(Error::TooFewVisible {
                id: String::new(),
                visible,
            });
        }
        if self
            .y
            .iter()
            .zip(&self.z)
            .any(|(y, &z)| z && !(y.x.is_finite() && y.y.is_finite()))
        {
            return Err(Error::InvalidArgument("visible keypoint is not finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_visible(&self) -> usize {
        self.z.iter().filter(|&&z| z).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_entropy: f64,
    pub w_canon: f64,
    pub w_arap: f64,
    pub pseudo_huber_eps: f64,
    pub b_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_entropy: 0.001,
            w_canon: 0.1,
            w_arap: 0.3,
            pseudo_huber_eps: 0.01,
            b_min: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_entropy, self.w_canon, self.w_arap];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and >= 0".into()));
        }
        if !(self.pseudo_huber_eps > 0.0 && self.pseudo_huber_eps.is_finite()) {
            return Err(Error::InvalidArgument("pseudo-Huber eps must be > 0".into()));
        }
        if !(self.b_min > 0.0 && self.b_min.is_finite()) {
            return Err(Error::InvalidArgument("b_min must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-term values; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub rep: f64,
    pub canon: f64,
    pub arap: f64,
    pub entropy: f64,
}

impl LossBreakdown {
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.total += weight * other.total;
        self.rep += weight * other.rep;
        self.canon += weight * other.canon;
        self.arap += weight * other.arap;
        self.entropy += weight * other.entropy;
    }
}

/// `L_rep + w_e L_entropy + w_c L_canon + w_a L_arap`.
pub fn loss_total(rep: f64, entropy: f64, canon: f64, arap: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        total: rep + weights.w_entropy * entropy + weights.w_canon * canon + weights.w_arap * arap,
        rep,
        canon,
        arap,
        entropy,
    }
}

pub fn pseudo_huber(r: f64, eps: f64) -> f64 {
    let t = r / eps;
    // eps (sqrt(1+t²) - 1) rewritten to avoid cancellation for small t
    eps * t * t / ((1.0 + t * t).sqrt() + 1.0)
}

/// `ρ'(r) / r`, finite at `r = 0`.
pub fn pseudo_huber_scale(r: f64, eps: f64) -> f64 {
    let t = r / eps;
    1.0 / (eps * (1.0 + t * t).sqrt())
}

/// Orthographic projection after the camera transform.
pub fn project_ortho(x: &[Vector3<f64>], cam: &RigidTransform) -> Vec<Vector2<f64>> {
    x.iter()
        .map(|p| {
            let q = cam.apply(p);
            Vector2::new(q.x, q.y)
        })
        .collect()
}

/// Gradient of a reprojection-type loss.
#[derive(Debug, Clone)]
pub struct ReprojectionGrad {
    pub value: f64,
    pub d_x: Vec<Vector3<f64>>,
    pub d_cam: TransformGrad,
    /// Only filled by the heteroscedastic variant.
    pub d_b: Vec<f64>,
}

fn check_reprojection_inputs(x: &[Vector3<f64>], kp: &KeypointSet, areas: &[f64]) -> Result<f64> {
    if x.len() != kp.len() || areas.len() != kp.len() {
        return Err(Error::Shape(format!(
            "{} points, {} keypoints, {} areas",
            x.len(),
            kp.len(),
            areas.len()
        )));
    }
    let norm: f64 = kp
        .z
        .iter()
        .zip(areas)
        .filter(|(z, _)| **z)
        .map(|(_, a)| *a)
        .sum();
    if kp.n_visible() == 0 {
        return Err(Error::NoVisibleKeypoints);
    }
    if !(norm > 0.0) {
        return Err(Error::InvalidArgument("visible keypoint areas must be positive".into()));
    }
    Ok(norm)
}

pub fn loss_reprojection(
    x: &[Vector3<f64>],
    cam: &RigidTransform,
    kp: &KeypointSet,
    areas: &[f64],
    eps: f64,
) -> Result<f64> {
    Ok(reprojection_impl(x, cam, kp, areas, eps, None, 0.0, false)?.value)
}

pub fn loss_reprojection_grad(
    x: &[Vector3<f64>],
    cam: &RigidTransform,
    kp: &KeypointSet,
    areas: &[f64],
    eps: f64,
) -> Result<ReprojectionGrad> {
    reprojection_impl(x, cam, kp, areas, eps, None, 0.0, true)
}

/// Laplace negative log-likelihood `log b + ρ / max(b, b_min)`; the clip
/// only touches the denominator.
pub fn loss_reprojection_hetero(
    x: &[Vector3<f64>],
    cam: &RigidTransform,
    kp: &KeypointSet,
    areas: &[f64],
    b: &[f64],
    eps: f64,
    b_min: f64,
) -> Result<f64> {
    Ok(reprojection_impl(x, cam, kp, areas, eps, Some(b), b_min, false)?.value)
}

pub fn loss_reprojection_hetero_grad(
    x: &[Vector3<f64>],
    cam: &RigidTransform,
    kp: &KeypointSet,
    areas: &[f64],
    b: &[f64],
    eps: f64,
    b_min: f64,
) -> Result<ReprojectionGrad> {
    reprojection_impl(x, cam, kp, areas, eps, Some(b), b_min, true)
}

#[allow(clippy::too_many_arguments)]
fn reprojection_impl(
    x: &[Vector3<f64>],
    cam: &RigidTransform,
    kp: &KeypointSet,
    areas: &[f64],
    eps: f64,
    b: Option<&[f64]>,
    b_min: f64,
    want_grad: bool,
) -> Result<ReprojectionGrad> {
    let norm = check_reprojection_inputs(x, kp, areas)?;
    if let Some(b) = b {
        if b.len() != kp.len() {
            return Err(Error::Shape(format!("{} uncertainties for {} keypoints", b.len(), kp.len())));
        }
        if b.iter().zip(&kp.z).any(|(b, z)| *z && !(*b > 0.0)) {
            return Err(Error::InvalidArgument("uncertainties must be positive".into()));
        }
    }
    let k_n = x.len();
    let mut out = ReprojectionGrad {
        value: 0.0,
        d_x: if want_grad { vec![Vector3::zeros(); k_n] } else { Vec::new() },
        d_cam: TransformGrad::zero(),
        d_b: if want_grad && b.is_some() { vec![0.0; k_n] } else { Vec::new() },
    };
    for k in 0..k_n {
        if !kp.z[k] {
            continue;
        }
        let w = areas[k] / norm;
        let q = cam.apply(&x[k]);
        let e = kp.y[k] - Vector2::new(q.x, q.y);
        let r = e.norm();
        let rho = pseudo_huber(r, eps);
        let (term, d_rho) = match b {
            None => (rho, 1.0),
            Some(b) => {
                let den = b[k].max(b_min);
                if want_grad {
                    let d_den = if b[k] > b_min { -rho / (den * den) } else { 0.0 };
                    out.d_b[k] = w * (1.0 / b[k] + d_den);
                }
                (b[k].ln() + rho / den, 1.0 / den)
            }
        };
        out.value += w * term;
        if want_grad {
            // dρ/dq_xy = -ρ'(r) e / r
            let g = -e * (w * d_rho * pseudo_huber_scale(r, eps));
            let dq = Vector3::new(g.x, g.y, 0.0);
            out.d_x[k] = cam.rotation * dq;
            out.d_cam.add_point(&x[k], &dq);
        }
    }
    Ok(out)
}

/// A network (or stub) that maps a rotated point cloud back to canonical
/// orientation.
pub trait Canonicalizer {
    fn canonicalize(&self, x: &[Vector3<f64>]) -> Vec<Vector3<f64>>;
}

impl<F: Fn(&[Vector3<f64>]) -> Vec<Vector3<f64>>> Canonicalizer for F {
    fn canonicalize(&self, x: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self(x)
    }
}

/// Rotates `x_hat` by a fresh random rotation, canonicalizes it and scores
/// the result against `x_hat`.
pub fn loss_canonicalization<R: Rng + ?Sized>(
    x_hat: &[Vector3<f64>],
    psi: &dyn Canonicalizer,
    eps: f64,
    rng: &mut R,
) -> Result<f64> {
    let rot = random_rotation(rng);
    let rotated: Vec<Vector3<f64>> = x_hat.iter().map(|p| rot.rotate(p)).collect();
    let out = psi.canonicalize(&rotated);
    Ok(canon_residual(x_hat, &out, eps, false)?.0)
}

/// `mean_k ρ(‖x_hat_k − psi_out_k‖)` and its gradients on both arguments.
pub fn canon_residual(
    x_hat: &[Vector3<f64>],
    psi_out: &[Vector3<f64>],
    eps: f64,
    want_grad: bool,
) -> Result<(f64, Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    if x_hat.len() != psi_out.len() || x_hat.is_empty() {
        return Err(Error::Shape(format!(
            "canonicalizer returned {} points for {}",
            psi_out.len(),
            x_hat.len()
        )));
    }
    let inv_k = 1.0 / x_hat.len() as f64;
    let mut value = 0.0;
    let mut d_x = Vec::new();
    let mut d_psi = Vec::new();
    for (a, b) in x_hat.iter().zip(psi_out) {
        let e = a - b;
        let r = e.norm();
        value += pseudo_huber(r, eps) * inv_k;
        if want_grad {
            let g = e * (pseudo_huber_scale(r, eps) * inv_k);
            d_x.push(g);
            d_psi.push(-g);
        }
    }
    Ok((value, d_x, d_psi))
}

/// Mean part entropy `-(1/K) Σ P log P`, with `0 log 0 = 0`. Row sums and
/// the mean are compensated, so a uniform `P` gives `ln M` to an ulp or two.
pub fn loss_entropy(p: &DMatrix<f64>) -> f64 {
    let rows = p.row_iter().map(|r| -compensated_sum(r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln())));
    compensated_sum(rows) / p.nrows() as f64
}

/// Neumaier summation.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

pub fn loss_entropy_grad(p: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let k = p.nrows() as f64;
    let g = p.map(|v| if v > 0.0 { -(v.ln() + 1.0) / k } else { 0.0 });
    (loss_entropy(p), g)
}

/// Weighted orthogonal Procrustes: the rotation `Q` minimising
/// `Σ w_i ‖a_i − Q b_i‖²`.
pub fn procrustes(a: &[Vector3<f64>], b: &[Vector3<f64>], w: &[f64]) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for ((a, b), w) in a.iter().zip(b).zip(w) {
        s += a * b.transpose() * *w;
    }
    let svd = s.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// As-rigid-as-possible energy against a fixed template. Each vertex gets a
/// best-fit rotation of its one-ring; the residual is the pseudo-Huber of
/// the per-edge misfit, and gradients treat the rotations as constants.
#[derive(Debug, Clone)]
pub struct Arap {
    rest: Vec<Vector3<f64>>,
    neighbours: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
}

impl Arap {
    /// Edge weight is a third of the incident face area over the total area.
    pub fn new(template: &TriMesh) -> Result<Self> {
        let edge_areas = template.edge_face_areas();
        let total = template.total_area();
        let neighbours = template.neighbours();
        for (vertex, nb) in neighbours.iter().enumerate() {
            if nb.len() < 2 {
                return Err(Error::TooFewNeighbours {
                    vertex,
                    count: nb.len(),
                });
            }
        }
        let weights = neighbours
            .iter()
            .enumerate()
            .map(|(k, nb)| {
                nb.iter()
                    .map(|&q| edge_areas[&(k.min(q), k.max(q))] / (3.0 * total))
                    .collect()
            })
            .collect();
        Ok(Arap {
            rest: template.vertices().to_vec(),
            neighbours,
            weights,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.rest.len()
    }

    fn check(&self, x: &[Vector3<f64>]) -> Result<()> {
        if x.len() != self.rest.len() {
            return Err(Error::Shape(format!(
                "ARAP template has {} vertices, got {}",
                self.rest.len(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Per-vertex rotations taking deformed one-ring edges onto rest edges.
    pub fn fit_rotations(&self, x: &[Vector3<f64>]) -> Result<Vec<Matrix3<f64>>> {
        self.check(x)?;
        Ok((0..self.rest.len())
            .map(|k| {
                let nb = &self.neighbours[k];
                let ev: Vec<_> = nb.iter().map(|&q| self.rest[q] - self.rest[k]).collect();
                let ex: Vec<_> = nb.iter().map(|&q| x[q] - x[k]).collect();
                procrustes(&ev, &ex, &self.weights[k])
            })
            .collect())
    }

    pub fn loss(&self, x: &[Vector3<f64>], eps: f64) -> Result<f64> {
        let rots = self.fit_rotations(x)?;
        Ok(self.loss_with_rotations(x, &rots, eps, false)?.0)
    }

    pub fn loss_grad(&self, x: &[Vector3<f64>], eps: f64) -> Result<(f64, Vec<Vector3<f64>>)> {
        let rots = self.fit_rotations(x)?;
        self.loss_with_rotations(x, &rots, eps, true)
    }

    /// The energy with rotations held fixed; its gradient is the one used
    /// in training.
    pub fn loss_with_rotations(
        &self,
        x: &[Vector3<f64>],
        rots: &[Matrix3<f64>],
        eps: f64,
        want_grad: bool,
    ) -> Result<(f64, Vec<Vector3<f64>>)> {
        self.check(x)?;
        if rots.len() != x.len() {
            return Err(Error::Shape("one rotation per vertex is required".into()));
        }
        let mut value = 0.0;
        let mut d_x = if want_grad { vec![Vector3::zeros(); x.len()] } else { Vec::new() };
        for k in 0..x.len() {
            for (&q, &w) in self.neighbours[k].iter().zip(&self.weights[k]) {
                let ex = x[q] - x[k];
                let d = (self.rest[q] - self.rest[k]) - rots[k] * ex;
                let r = d.norm();
                value += w * pseudo_huber(r, eps);
                if want_grad {
                    let g = -(rots[k].transpose() * d) * (w * pseudo_huber_scale(r, eps));
                    d_x[q] += g;
                    d_x[k] -= g;
                }
            }
        }
        Ok((value, d_x))
    }
}

/// Canonicalization draws one rotation per call; exposed for callers that
/// run the network themselves.
pub fn rotate_points(x: &[Vector3<f64>], rot: &RigidTransform) -> Vec<Vector3<f64>> {
    x.iter().map(|p| rot.rotate(p)).collect()
}
