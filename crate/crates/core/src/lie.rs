//! SE(3) rigid transforms and their twist coordinates.
//!
//! Convention: points are row vectors and a transform acts as `p ↦ p R + T`.
//! `RigidTransform::rotation` stores that `R`. Because nalgebra vectors are
//! columns, `apply` evaluates `Rᵀ p + T`. A twist `(ω, v)` exponentiates to
//! the transform that rotates points by `|ω|` radians about `ω`
//! (right-handed) after the usual left-Jacobian coupling of `v`; in stored
//! form `R = Rodrigues(ω)ᵀ`.

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this angle the trigonometric coefficients switch to their Taylor
/// series (four terms).
pub const SERIES_THRESHOLD: f64 = 1e-2;

/// `se3_log` refuses rotations within this distance of π.
pub const BRANCH_CUT_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn zero() -> Self {
        Twist::new(Vector3::zeros(), Vector3::zeros())
    }

    /// `[ω; v]` layout.
    pub fn from_slice(h: &[f64]) -> Self {
        Twist::new(
            Vector3::new(h[0], h[1], h[2]),
            Vector3::new(h[3], h[4], h[5]),
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "TransformRecord", try_from = "TransformRecord")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// `{R: [9] row-major, T: [3]}` wire form, `R` in the row-vector convention.
#[derive(Serialize, Deserialize)]
struct TransformRecord {
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
}

impl From<RigidTransform> for TransformRecord {
    fn from(g: RigidTransform) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = g.rotation[(i, j)];
            }
        }
        TransformRecord {
            r,
            t: g.translation.into(),
        }
    }
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = Error;

    fn try_from(rec: TransformRecord) -> Result<Self> {
        RigidTransform::new(Matrix3::from_row_slice(&rec.r), Vector3::from(rec.t))
    }
}

impl RigidTransform {
    /// Validates `RᵀR = I` and `det R = 1` to 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let g = RigidTransform {
            rotation,
            translation,
        };
        if !g.is_valid(1e-9) {
            return Err(Error::InvalidArgument(
                "rotation is not orthonormal with unit determinant".into(),
            ));
        }
        Ok(g)
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).amax();
        ortho <= tol
            && (r.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }

    /// `p R + T`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(p) + self.translation
    }

    /// `p R` without translation.
    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(p)
    }

    /// The transform that applies `self` first and `then` second.
    pub fn compose(&self, then: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * then.rotation,
            translation: then.rotation.tr_mul(&self.translation) + then.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.transpose(),
            translation: -(self.rotation * self.translation),
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let r = &self.rotation;
        let s = 0.5 * vee(&(r - r.transpose())).norm();
        let c = 0.5 * (r.trace() - 1.0);
        s.atan2(c)
    }

    /// Column-convention homogeneous matrix `[[Rᵀ, T], [0, 1]]`.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.transpose());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Gradient of a rigid transform's entries `(R, T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformGrad {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl TransformGrad {
    pub fn zero() -> Self {
        TransformGrad {
            rotation: Matrix3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    /// Accumulates the gradient of `y = p R + T` given `dy`.
    pub fn add_point(&mut self, p: &Vector3<f64>, dy: &Vector3<f64>) {
        self.rotation += p * dy.transpose();
        self.translation += dy;
    }
}

/// Back-propagates through `first.compose(second)`.
pub fn compose_vjp(
    first: &RigidTransform,
    second: &RigidTransform,
    d: &TransformGrad,
) -> (TransformGrad, TransformGrad) {
    let d_first = TransformGrad {
        rotation: d.rotation * second.rotation.transpose(),
        translation: second.rotation * d.translation,
    };
    let d_second = TransformGrad {
        rotation: first.rotation.transpose() * d.rotation
            + first.translation * d.translation.transpose(),
        translation: d.translation,
    };
    (d_first, d_second)
}

pub fn apply(g: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    g.apply(p)
}

pub fn compose(first: &RigidTransform, second: &RigidTransform) -> RigidTransform {
    first.compose(second)
}

pub fn invert(g: &RigidTransform) -> RigidTransform {
    g.inverse()
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `sin θ/θ`, `(1-cos θ)/θ²`, `(θ-sin θ)/θ³` and their derivatives divided
/// by `θ`, as functions of `θ`.
#[derive(Debug, Clone, Copy)]
struct Coeffs {
    a: f64,
    b: f64,
    c: f64,
    da: f64,
    db: f64,
    dc: f64,
}

fn coeffs(theta: f64) -> Coeffs {
    if theta < SERIES_THRESHOLD {
        let t = theta * theta;
        Coeffs {
            a: 1.0 - t / 6.0 * (1.0 - t / 20.0 * (1.0 - t / 42.0)),
            b: 0.5 - t / 24.0 * (1.0 - t / 30.0 * (1.0 - t / 56.0)),
            c: 1.0 / 6.0 - t / 120.0 * (1.0 - t / 42.0 * (1.0 - t / 72.0)),
            da: -1.0 / 3.0 + t / 30.0 - t * t / 840.0 + t * t * t / 45360.0,
            db: -1.0 / 12.0 + t / 180.0 - t * t / 6720.0 + t * t * t / 453600.0,
            dc: -1.0 / 60.0 + t / 1260.0 - t * t / 60480.0 + t * t * t / 4989600.0,
        }
    } else {
        let (s, co) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        Coeffs {
            a: s / theta,
            b: (1.0 - co) / t2,
            c: (theta - s) / t3,
            da: (theta * co - s) / t3,
            db: (theta * s - 2.0 * (1.0 - co)) / (t2 * t2),
            dc: (theta * (1.0 - co) - 3.0 * (theta - s)) / (t3 * t2),
        }
    }
}

/// Exponential map: `R = Rodrigues(ω)ᵀ` (stored form), `T = V(ω) v`.
pub fn se3_exp(h: &Twist) -> RigidTransform {
    let theta = h.omega.norm();
    let k = hat(&h.omega);
    let k2 = k * k;
    let cf = coeffs(theta);
    let rc = Matrix3::identity() + k * cf.a + k2 * cf.b;
    let v = Matrix3::identity() + k * cf.b + k2 * cf.c;
    RigidTransform {
        rotation: rc.transpose(),
        translation: v * h.v,
    }
}

/// Partial derivatives of `se3_exp` with respect to the six twist
/// coordinates `[ω; v]`, in stored (row-convention) form.
#[derive(Debug, Clone)]
pub struct ExpJacobian {
    pub d_rotation: [Matrix3<f64>; 6],
    pub d_translation: [Vector3<f64>; 6],
}

pub fn se3_exp_jacobian(h: &Twist) -> (RigidTransform, ExpJacobian) {
    let w = h.omega;
    let theta = w.norm();
    let k = hat(&w);
    let k2 = k * k;
    let cf = coeffs(theta);
    let rc = Matrix3::identity() + k * cf.a + k2 * cf.b;
    let vmat = Matrix3::identity() + k * cf.b + k2 * cf.c;
    let mut d_rotation = [Matrix3::zeros(); 6];
    let mut d_translation = [Vector3::zeros(); 6];
    for i in 0..3 {
        let e = hat(&Vector3::ith(i, 1.0));
        let sym = e * k + k * e;
        let d_rc = k * (cf.da * w[i]) + e * cf.a + k2 * (cf.db * w[i]) + sym * cf.b;
        let d_v = k * (cf.db * w[i]) + e * cf.b + k2 * (cf.dc * w[i]) + sym * cf.c;
        d_rotation[i] = d_rc.transpose();
        d_translation[i] = d_v * h.v;
        d_translation[3 + i] = vmat.column(i).into_owned();
    }
    (
        RigidTransform {
            rotation: rc.transpose(),
            translation: vmat * h.v,
        },
        ExpJacobian {
            d_rotation,
            d_translation,
        },
    )
}

impl ExpJacobian {
    /// Pulls a gradient on `(R, T)` back to the twist coordinates.
    pub fn vjp(&self, d_rot: &Matrix3<f64>, d_trans: &Vector3<f64>) -> [f64; 6] {
        let mut out = [0.0; 6];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.d_rotation[i].component_mul(d_rot).sum()
                + self.d_translation[i].dot(d_trans);
        }
        out
    }
}

/// Logarithm on the canonical branch `|ω| < π`. Rotations within
/// `BRANCH_CUT_MARGIN` of π are rejected rather than wrapped.
pub fn se3_log(g: &RigidTransform) -> Result<Twist> {
    let rc = g.rotation.transpose();
    let axis_sin = 0.5 * vee(&(rc - rc.transpose()));
    let s = axis_sin.norm();
    let c = 0.5 * (rc.trace() - 1.0);
    let theta = s.atan2(c);
    if theta >= std::f64::consts::PI - BRANCH_CUT_MARGIN {
        return Err(Error::BranchCut { angle: theta });
    }
    let omega = if theta < SERIES_THRESHOLD {
        let t = theta * theta;
        axis_sin * (1.0 + t / 6.0 + 7.0 * t * t / 360.0 + 31.0 * t * t * t / 15120.0)
    } else if c > -0.5 {
        axis_sin * (theta / s)
    } else {
        // sin θ is small near π; recover the axis from the symmetric part.
        let sym = (rc + rc.transpose()) * 0.5;
        let nn = (sym - Matrix3::identity() * c) / (1.0 - c);
        let col = (0..3)
            .max_by(|&a, &b| nn[(a, a)].total_cmp(&nn[(b, b)]))
            .unwrap();
        let mut n = nn.column(col).into_owned();
        n /= n.norm();
        if n.dot(&axis_sin) < 0.0 {
            n = -n;
        }
        n * theta
    };
    let k = hat(&omega);
    let d = if theta < SERIES_THRESHOLD {
        let t = theta * theta;
        1.0 / 12.0 + t / 720.0 + t * t / 30240.0 + t * t * t / 1209600.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Twist::new(omega, v_inv * g.translation))
}

/// Haar-uniform rotation from a normalised 4D Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RigidTransform {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    RigidTransform {
        rotation: uq.to_rotation_matrix().into_inner().transpose(),
        translation: Vector3::zeros(),
    }
}
