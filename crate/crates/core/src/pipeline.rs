//! End-to-end model: the keypoint regressor Φ predicts per-instance twists
//! (and blendshape coefficients), the articulation model poses the template,
//! and the losses are evaluated with hand-derived gradients back into every
//! tensor of the `ParamSet`.

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{random_rotation, se3_exp_jacobian, ExpJacobian, RigidTransform, TransformGrad, Twist};
use crate::loss::{
    canon_residual, loss_entropy_grad, loss_reprojection_grad, loss_reprojection_hetero_grad, loss_total, Arap,
    KeypointSet, LossBreakdown, LossWeights,
};
use crate::mesh::{barycell_areas, SpectralBasis, TriMesh};
use crate::model::{
    blend_displacement, blend_displacement_backward, init_segmentation_weights, part_transform_vjp, row6,
    skin_points, skin_points_backward, softmax_rows, softmax_rows_backward, PoseParams,
};
use crate::nn::{MlpCache, MlpConfig, Mode, ResidualMlp, UncertaintyHead};
use crate::optim::{BatchObjective, Gradients, Objective, ParamId, ParamSet, StepOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Soft parts with linear blend skinning.
    Parts,
    /// A single rigid camera transform over a linear blendshape model.
    NoPartsLinear,
    /// Blendshapes for body type, then part-based skinning.
    PartsPlusBlendshapes,
}

impl ModelVariant {
    pub fn has_parts(self) -> bool {
        !matches!(self, ModelVariant::NoPartsLinear)
    }

    pub fn has_blendshapes(self) -> bool {
        !matches!(self, ModelVariant::Parts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub n_parts: usize,
    pub n_u: usize,
    pub sigma_bar: f64,
    pub n_blendshapes: usize,
    pub phi: MlpConfig,
    pub psi: MlpConfig,
    /// Replace the reprojection term by the Laplace likelihood with a
    /// predicted per-keypoint scale.
    pub heteroscedastic: bool,
    pub uncertainty_hidden: usize,
    /// Learn an isotropic image scale applied after the camera.
    pub camera_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Parts,
            n_parts: crate::model::DEFAULT_N_PARTS,
            n_u: crate::model::DEFAULT_N_U,
            sigma_bar: crate::model::DEFAULT_SIGMA_BAR,
            n_blendshapes: 10,
            phi: MlpConfig::default(),
            psi: MlpConfig::default(),
            heteroscedastic: false,
            uncertainty_hidden: 64,
            camera_scale: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, n_vertices: usize) -> Result<()> {
        if self.variant.has_parts() && self.n_parts == 0 {
            return Err(Error::InvalidArgument("m_parts must be at least 1".into()));
        }
        if self.n_u == 0 || self.n_u > n_vertices {
            return Err(Error::InvalidArgument(format!(
                "n_u = {} must be in 1..={} (the vertex count)",
                self.n_u, n_vertices
            )));
        }
        if !(self.sigma_bar > 0.0 && self.sigma_bar.is_finite()) {
            return Err(Error::InvalidArgument("sigma_bar must be positive".into()));
        }
        if self.variant.has_blendshapes() && self.n_blendshapes == 0 {
            return Err(Error::InvalidArgument("blendshape variants need n_blendshapes >= 1".into()));
        }
        if self.heteroscedastic && !self.variant.has_parts() {
            return Err(Error::InvalidArgument(
                "the heteroscedastic loss needs a part-based variant".into(),
            ));
        }
        for (name, c) in [("phi", &self.phi), ("psi", &self.psi)] {
            if c.width == 0 || c.hidden == 0 || !(c.head_gain.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} network sizes must be positive")));
            }
        }
        if self.heteroscedastic && self.uncertainty_hidden == 0 {
            return Err(Error::InvalidArgument("uncertainty_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Number of part transforms actually modelled.
    pub fn n_transforms(&self) -> usize {
        if self.variant.has_parts() {
            self.n_parts
        } else {
            0
        }
    }

    pub fn n_coeffs(&self) -> usize {
        if self.variant.has_blendshapes() {
            self.n_blendshapes
        } else {
            0
        }
    }

    /// Width of Φ's output row: camera twist, part twists, coefficients.
    pub fn phi_output_dim(&self) -> usize {
        6 * (self.n_transforms() + 1) + self.n_coeffs()
    }
}

/// Which loss terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub rep: bool,
    pub canon: bool,
    pub arap: bool,
    pub entropy: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        rep: true,
        canon: true,
        arap: true,
        entropy: true,
    };

    pub fn only(term: &str) -> Result<TermMask> {
        let mut m = TermMask {
            rep: false,
            canon: false,
            arap: false,
            entropy: false,
        };
        match term {
            "rep" => m.rep = true,
            "canon" => m.canon = true,
            "arap" => m.arap = true,
            "entropy" => m.entropy = true,
            _ => return Err(Error::InvalidArgument(format!("unknown loss term `{term}`"))),
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    w: Option<ParamId>,
    rest_logs: Option<ParamId>,
    w_b: Option<ParamId>,
    log_scale: Option<ParamId>,
}

/// The trained object: template, basis, parameter bindings and networks.
/// Parameters themselves live in a separate `ParamSet`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub template: Arc<TriMesh>,
    pub basis: Arc<SpectralBasis>,
    pub weights: LossWeights,
    areas: Vec<f64>,
    arap: Arap,
    ids: Ids,
    phi: ResidualMlp,
    psi: ResidualMlp,
    unc: Option<UncertaintyHead>,
}

/// Options for one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions<'a> {
    pub want_grad: bool,
    pub terms: TermMask,
    /// Use these per-instance ARAP rotations instead of re-fitting them.
    pub frozen_rotations: Option<&'a [Vec<Matrix3<f64>>]>,
    pub mode: Mode,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        EvalOptions {
            want_grad: true,
            terms: TermMask::ALL,
            frozen_rotations: None,
            mode: Mode::Train,
        }
    }
}

/// Result of evaluating the losses on a batch of Φ output rows.
#[derive(Debug, Clone)]
pub struct RowsResult {
    pub breakdown: LossBreakdown,
    /// Gradient on each output row, if requested.
    pub d_rows: Option<DMatrix<f64>>,
    pub state_updates: Vec<(ParamId, DMatrix<f64>)>,
    pub arap_rotations: Vec<Vec<Matrix3<f64>>>,
}

/// Per-instance model output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub pose: PoseParams,
    /// Posed vertices in the object frame.
    pub x_object: Vec<Vector3<f64>>,
    /// The same vertices in the camera frame (image units).
    pub x_camera: Vec<Vector3<f64>>,
    pub uncertainty: Option<Vec<f64>>,
}

struct Decoded {
    camera: Twist,
    parts: Vec<Twist>,
    coeffs: Vec<f64>,
}

struct Forward {
    dec: Decoded,
    base: Vec<Vector3<f64>>,
    transforms: Vec<RigidTransform>,
    x: Vec<Vector3<f64>>,
    cam: RigidTransform,
    cam_jac: ExpJacobian,
    /// `cam.apply(x)`, before the optional image scale.
    xc: Vec<Vector3<f64>>,
}

struct InstanceOut {
    rep: f64,
    arap: f64,
    d_x: Vec<Vector3<f64>>,
    d_row: Vec<f64>,
    d_p: Option<DMatrix<f64>>,
    d_rest: DMatrix<f64>,
    d_wb: Option<DMatrix<f64>>,
    d_log_scale: f64,
    d_b: Vec<f64>,
    rotations: Vec<Matrix3<f64>>,
}

impl Model {
    /// Builds a fresh model and its initial parameters from `seed`.
    pub fn new(
        template: Arc<TriMesh>,
        basis: Arc<SpectralBasis>,
        config: ModelConfig,
        weights: LossWeights,
        seed: u64,
    ) -> Result<(Model, ParamSet)> {
        config.validate(template.n_vertices())?;
        weights.validate()?;
        let basis = fit_basis(&template, basis, config.n_u)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let k = template.n_vertices();
        let m = config.n_transforms();
        if config.variant.has_parts() {
            let w = init_segmentation_weights(config.n_u, m, config.sigma_bar, &mut rng);
            params.add("part.w", w, true)?;
            params.add("part.rest_logs", DMatrix::zeros(m, 6), true)?;
        }
        if config.variant.has_blendshapes() {
            params.add("blend.w_b", DMatrix::zeros(3 * config.n_blendshapes, config.n_u), true)?;
        }
        if config.camera_scale {
            params.add("camera.log_scale", DMatrix::zeros(1, 1), true)?;
        }
        ResidualMlp::new(&mut params, "phi", 3 * k, config.phi_output_dim(), config.phi, &mut rng)?;
        ResidualMlp::new(&mut params, "psi", 3 * k, 3 * k, config.psi, &mut rng)?;
        if config.heteroscedastic {
            UncertaintyHead::new(&mut params, "unc", config.n_u + 6, config.uncertainty_hidden, &mut rng)?;
        }
        let model = Model::bind(template, basis, config, weights, &params)?;
        Ok((model, params))
    }

    /// Attaches to an existing parameter set, checking every shape.
    pub fn bind(
        template: Arc<TriMesh>,
        basis: Arc<SpectralBasis>,
        config: ModelConfig,
        weights: LossWeights,
        params: &ParamSet,
    ) -> Result<Model> {
        config.validate(template.n_vertices())?;
        weights.validate()?;
        let basis = fit_basis(&template, basis, config.n_u)?;
        let k = template.n_vertices();
        let m = config.n_transforms();
        let need = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` is {:?}, expected {:?}",
                    params.get(id).shape(),
                    shape
                )));
            }
            Ok(id)
        };
        let ids = Ids {
            w: config
                .variant
                .has_parts()
                .then(|| need("part.w", (config.n_u, m)))
                .transpose()?,
            rest_logs: config
                .variant
                .has_parts()
                .then(|| need("part.rest_logs", (m, 6)))
                .transpose()?,
            w_b: config
                .variant
                .has_blendshapes()
                .then(|| need("blend.w_b", (3 * config.n_blendshapes, config.n_u)))
                .transpose()?,
            log_scale: config
                .camera_scale
                .then(|| need("camera.log_scale", (1, 1)))
                .transpose()?,
        };
        let phi = ResidualMlp::bind(params, "phi", 3 * k, config.phi_output_dim(), config.phi)?;
        let psi = ResidualMlp::bind(params, "psi", 3 * k, 3 * k, config.psi)?;
        let unc = if config.heteroscedastic {
            Some(UncertaintyHead::bind(params, "unc", config.n_u + 6, config.uncertainty_hidden)?)
        } else {
            None
        };
        Ok(Model {
            areas: barycell_areas(&template)?,
            arap: Arap::new(&template)?,
            config,
            template,
            basis,
            weights,
            ids,
            phi,
            psi,
            unc,
        })
    }

    pub fn n_keypoints(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn phi(&self) -> &ResidualMlp {
        &self.phi
    }

    pub fn psi(&self) -> &ResidualMlp {
        &self.psi
    }

    pub fn uncertainty_head(&self) -> Option<&UncertaintyHead> {
        self.unc.as_ref()
    }

    /// Soft segmentation `P` for part-based variants.
    pub fn segmentation(&self, params: &ParamSet) -> Option<DMatrix<f64>> {
        self.ids.w.map(|w| softmax_rows(&(&self.basis.u * params.get(w))))
    }

    fn scale(&self, params: &ParamSet) -> f64 {
        self.ids.log_scale.map_or(1.0, |id| params.get(id)[(0, 0)].exp())
    }

    /// Φ input: visible keypoints zero-centred on their mean and masked,
    /// then the visibility flags: `[u_0, v_0, …, u_K, v_K, z_0, …, z_K]`.
    pub fn encode(&self, kps: &[&KeypointSet]) -> Result<DMatrix<f64>> {
        let k = self.n_keypoints();
        let mut x = DMatrix::zeros(kps.len(), 3 * k);
        for (r, kp) in kps.iter().enumerate() {
            if kp.len() != k {
                return Err(Error::Shape(format!("{} keypoints for a {k}-vertex template", kp.len())));
            }
            let n_vis = kp.n_visible();
            if n_vis == 0 {
                return Err(Error::NoVisibleKeypoints);
            }
            let mean = kp
                .y
                .iter()
                .zip(&kp.z)
                .filter(|(_, z)| **z)
                .fold(nalgebra::Vector2::zeros(), |a, (y, _)| a + y)
                / n_vis as f64;
            for i in 0..k {
                if kp.z[i] {
                    let c = kp.y[i] - mean;
                    x[(r, 2 * i)] = c.x;
                    x[(r, 2 * i + 1)] = c.y;
                    x[(r, 2 * k + i)] = 1.0;
                }
            }
        }
        Ok(x)
    }

    fn decode(&self, row: &[f64]) -> Decoded {
        let m = self.config.n_transforms();
        Decoded {
            camera: Twist::from_slice(&row[0..6]),
            parts: (0..m).map(|j| Twist::from_slice(&row[6 * (j + 1)..6 * (j + 2)])).collect(),
            coeffs: row[6 * (m + 1)..].to_vec(),
        }
    }

    fn forward_row(&self, params: &ParamSet, p: Option<&DMatrix<f64>>, row: &[f64]) -> Result<Forward> {
        let dec = self.decode(row);
        let base = match self.ids.w_b {
            Some(id) => {
                let disp = blend_displacement(&self.basis, params.get(id), &dec.coeffs)?;
                self.template.vertices().iter().zip(disp).map(|(v, d)| v + d).collect()
            }
            None => self.template.vertices().to_vec(),
        };
        let (transforms, x) = match (p, self.ids.rest_logs) {
            (Some(p), Some(rest_id)) => {
                let rest = params.get(rest_id);
                let transforms: Vec<RigidTransform> = dec
                    .parts
                    .iter()
                    .enumerate()
                    .map(|(m, h)| {
                        let r = crate::lie::se3_exp(&Twist::from_slice(&row6(rest, m)));
                        r.compose(&crate::lie::se3_exp(h))
                    })
                    .collect();
                let x = skin_points(&base, p, &transforms);
                (transforms, x)
            }
            _ => (Vec::new(), base.clone()),
        };
        let (cam, cam_jac) = se3_exp_jacobian(&dec.camera);
        let xc = x.iter().map(|v| cam.apply(v)).collect();
        Ok(Forward {
            dec,
            base,
            transforms,
            x,
            cam,
            cam_jac,
            xc,
        })
    }

    /// Uncertainty-head input rows `[U_k ; Σ_m P_km h_m]`.
    fn head_input(&self, p: &DMatrix<f64>, parts: &[Twist]) -> DMatrix<f64> {
        let n_u = self.config.n_u;
        let k = self.n_keypoints();
        DMatrix::from_fn(k, n_u + 6, |i, j| {
            if j < n_u {
                self.basis.u[(i, j)]
            } else {
                parts
                    .iter()
                    .enumerate()
                    .map(|(m, h)| p[(i, m)] * h.to_array()[j - n_u])
                    .sum()
            }
        })
    }

    /// Per-keypoint scales `b_k` for a decoded pose.
    pub fn uncertainty_forward(&self, params: &ParamSet, pose: &PoseParams) -> Result<Option<Vec<f64>>> {
        let (Some(head), Some(p)) = (&self.unc, self.segmentation(params)) else {
            return Ok(None);
        };
        let input = self.head_input(&p, &pose.twists[1..]);
        Ok(Some(head.forward(params, &input)?.0))
    }

    /// Evaluates the weighted losses for a batch of Φ output rows (one per
    /// keypoint set), averaging over instances.
    pub fn evaluate_rows(
        &self,
        params: &ParamSet,
        rows: &DMatrix<f64>,
        kps: &[&KeypointSet],
        rng: &mut ChaCha8Rng,
        opts: EvalOptions<'_>,
        grads: &mut Gradients,
    ) -> Result<RowsResult> {
        let b = kps.len();
        if b == 0 || rows.nrows() != b || rows.ncols() != self.config.phi_output_dim() {
            return Err(Error::Shape(format!(
                "{} rows of width {} for {} instances (expected width {})",
                rows.nrows(),
                rows.ncols(),
                b,
                self.config.phi_output_dim()
            )));
        }
        if let Some(f) = opts.frozen_rotations {
            if f.len() != b {
                return Err(Error::Shape("one frozen rotation set per instance is required".into()));
            }
        }
        let k = self.n_keypoints();
        let w = &self.weights;
        let eps = w.pseudo_huber_eps;
        let inv_b = 1.0 / b as f64;
        let p = self.segmentation(params);
        let scale = self.scale(params);
        // One canonicalization rotation per instance, drawn in order.
        let rots: Vec<RigidTransform> = (0..b).map(|_| random_rotation(rng)).collect();

        let row_vecs: Vec<Vec<f64>> = rows.row_iter().map(|r| r.iter().copied().collect()).collect();
        let forwards: Vec<Forward> = row_vecs
            .par_iter()
            .map(|row| self.forward_row(params, p.as_ref(), row))
            .collect::<Result<_>>()?;

        // Canonicalization: Ψ sees the rotated object-frame reconstruction.
        let mut canon = 0.0;
        let mut d_x_canon: Vec<Vec<Vector3<f64>>> = vec![Vec::new(); b];
        let mut state_updates = Vec::new();
        if opts.terms.canon {
            let psi_in = DMatrix::from_fn(b, 3 * k, |i, j| rots[i].rotate(&forwards[i].x[j / 3])[j % 3]);
            let (psi_out, psi_cache): (DMatrix<f64>, MlpCache) = self.psi.forward(params, &psi_in, opts.mode)?;
            if opts.mode == Mode::Train {
                state_updates.extend(self.psi.running_updates(params, &psi_cache));
            }
            let mut d_psi_out = DMatrix::zeros(b, 3 * k);
            let scale_c = w.w_canon * inv_b;
            for i in 0..b {
                let out: Vec<Vector3<f64>> = (0..k)
                    .map(|j| Vector3::new(psi_out[(i, 3 * j)], psi_out[(i, 3 * j + 1)], psi_out[(i, 3 * j + 2)]))
                    .collect();
                let (v, dx, dpsi) = canon_residual(&forwards[i].x, &out, eps, opts.want_grad)?;
                canon += v * inv_b;
                if opts.want_grad {
                    for j in 0..k {
                        for c in 0..3 {
                            d_psi_out[(i, 3 * j + c)] = dpsi[j][c] * scale_c;
                        }
                    }
                    d_x_canon[i] = dx.into_iter().map(|g| g * scale_c).collect();
                }
            }
            if opts.want_grad {
                let d_psi_in = self.psi.backward(params, &psi_cache, &d_psi_out, grads);
                for i in 0..b {
                    for j in 0..k {
                        let g = Vector3::new(d_psi_in[(i, 3 * j)], d_psi_in[(i, 3 * j + 1)], d_psi_in[(i, 3 * j + 2)]);
                        // rotate(x) = Rᵀx, so the pull-back is R g
                        d_x_canon[i][j] += rots[i].rotation * g;
                    }
                }
            }
        }

        // Uncertainty head (forward in parallel, backward below in order).
        let head_inputs: Vec<Option<DMatrix<f64>>> = forwards
            .iter()
            .map(|f| match (&self.unc, &p) {
                (Some(_), Some(p)) if opts.terms.rep => Some(self.head_input(p, &f.dec.parts)),
                _ => None,
            })
            .collect();
        let head_fwd: Vec<Option<(Vec<f64>, crate::nn::HeadCache)>> = head_inputs
            .par_iter()
            .map(|inp| match (&self.unc, inp) {
                (Some(h), Some(x)) => h.forward(params, x).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;

        let outs: Vec<InstanceOut> = (0..b)
            .into_par_iter()
            .map(|i| {
                self.instance_backward(
                    params,
                    p.as_ref(),
                    &forwards[i],
                    kps[i],
                    scale,
                    head_fwd[i].as_ref().map(|h| h.0.as_slice()),
                    &d_x_canon[i],
                    opts.frozen_rotations.map(|f| f[i].as_slice()),
                    inv_b,
                    &opts,
                )
            })
            .collect::<Result<_>>()?;

        let rep: f64 = outs.iter().map(|o| o.rep).sum::<f64>() * inv_b;
        let arap: f64 = outs.iter().map(|o| o.arap).sum::<f64>() * inv_b;
        let entropy = match (&p, opts.terms.entropy) {
            (Some(p), true) => loss_entropy_grad(p).0,
            _ => 0.0,
        };
        let breakdown = loss_total(rep, entropy, canon, arap, w);

        let mut d_rows = None;
        if opts.want_grad {
            let mut d = DMatrix::zeros(b, rows.ncols());
            let mut d_p = p.as_ref().map(|p| DMatrix::zeros(p.nrows(), p.ncols()));
            let mut d_rest = DMatrix::zeros(self.config.n_transforms(), 6);
            let mut d_wb = self.ids.w_b.map(|id| DMatrix::zeros(params.get(id).nrows(), params.get(id).ncols()));
            let mut d_log_scale = 0.0;
            for (i, o) in outs.iter().enumerate() {
                d.row_mut(i).copy_from_slice(&o.d_row);
                if let (Some(acc), Some(g)) = (d_p.as_mut(), o.d_p.as_ref()) {
                    *acc += g;
                }
                d_rest += &o.d_rest;
                if let (Some(acc), Some(g)) = (d_wb.as_mut(), o.d_wb.as_ref()) {
                    *acc += g;
                }
                d_log_scale += o.d_log_scale;
            }
            // Heteroscedastic head: d_b was folded into the instance pass;
            // the head's own backward runs here in instance order.
            if let (Some(head), Some(p)) = (&self.unc, &p) {
                let n_u = self.config.n_u;
                for (i, hf) in head_fwd.iter().enumerate() {
                    let Some((_, cache)) = hf else { continue };
                    let d_in = head.backward(params, cache, &outs[i].d_b, grads);
                    let parts = &forwards[i].dec.parts;
                    let dp = d_p.as_mut().expect("parts variant");
                    for kk in 0..p.nrows() {
                        let db = d_in.fixed_view::<1, 6>(kk, n_u);
                        for (m, h) in parts.iter().enumerate() {
                            let ha = h.to_array();
                            dp[(kk, m)] += (0..6).map(|c| db[c] * ha[c]).sum::<f64>();
                            for c in 0..6 {
                                d[(i, 6 * (m + 1) + c)] += p[(kk, m)] * db[c];
                            }
                        }
                    }
                }
            }
            if let (Some(p), Some(mut dp)) = (&p, d_p) {
                if opts.terms.entropy {
                    dp += loss_entropy_grad(p).1 * w.w_entropy;
                }
                let dw = self.basis.u.transpose() * softmax_rows_backward(p, &dp);
                grads.accumulate(self.ids.w.expect("parts variant"), &dw);
                grads.accumulate(self.ids.rest_logs.expect("parts variant"), &d_rest);
            }
            if let (Some(id), Some(g)) = (self.ids.w_b, d_wb) {
                grads.accumulate(id, &g);
            }
            if let Some(id) = self.ids.log_scale {
                grads.accumulate(id, &DMatrix::from_element(1, 1, d_log_scale));
            }
            d_rows = Some(d);
        }
        Ok(RowsResult {
            breakdown,
            d_rows,
            state_updates,
            arap_rotations: outs.into_iter().map(|o| o.rotations).collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn instance_backward(
        &self,
        params: &ParamSet,
        p: Option<&DMatrix<f64>>,
        f: &Forward,
        kp: &KeypointSet,
        scale: f64,
        b: Option<&[f64]>,
        d_x_canon: &[Vector3<f64>],
        frozen: Option<&[Matrix3<f64>]>,
        inv_b: f64,
        opts: &EvalOptions<'_>,
    ) -> Result<InstanceOut> {
        let eps = self.weights.pseudo_huber_eps;
        let k = f.x.len();
        let mut d_x = vec![Vector3::zeros(); k];
        let mut d_cam = TransformGrad::zero();
        let mut d_log_scale = 0.0;
        let mut rep = 0.0;
        let mut d_b = Vec::new();
        if opts.terms.rep {
            let pts: Vec<Vector3<f64>> = f.xc.iter().map(|v| v * scale).collect();
            let ident = RigidTransform::identity();
            let g = match b {
                Some(b) => loss_reprojection_hetero_grad(&pts, &ident, kp, &self.areas, b, eps, self.weights.b_min)?,
                None => loss_reprojection_grad(&pts, &ident, kp, &self.areas, eps)?,
            };
            rep = g.value;
            if opts.want_grad {
                d_b = g.d_b.iter().map(|v| v * inv_b).collect();
                for j in 0..k {
                    // pts = s · cam(x)
                    let dp = g.d_x[j] * inv_b;
                    d_log_scale += dp.dot(&pts[j]);
                    let dxc = dp * scale;
                    d_x[j] += f.cam.rotation * dxc;
                    d_cam.add_point(&f.x[j], &dxc);
                }
            }
        }
        let mut arap = 0.0;
        let mut rotations = Vec::new();
        if opts.terms.arap {
            rotations = match frozen {
                Some(r) => r.to_vec(),
                None => self.arap.fit_rotations(&f.x)?,
            };
            let (v, g) = self.arap.loss_with_rotations(&f.x, &rotations, eps, opts.want_grad)?;
            arap = v;
            if opts.want_grad {
                let s = self.weights.w_arap * inv_b;
                for (d, g) in d_x.iter_mut().zip(g) {
                    *d += g * s;
                }
            }
        }
        let m = self.config.n_transforms();
        let mut out = InstanceOut {
            rep,
            arap,
            d_x: Vec::new(),
            d_row: vec![0.0; self.config.phi_output_dim()],
            d_p: None,
            d_rest: DMatrix::zeros(m, 6),
            d_wb: None,
            d_log_scale,
            d_b,
            rotations,
        };
        if !opts.want_grad {
            return Ok(out);
        }
        for (d, c) in d_x.iter_mut().zip(d_x_canon) {
            *d += c;
        }
        out.d_row[0..6].copy_from_slice(&f.cam_jac.vjp(&d_cam.rotation, &d_cam.translation));
        let d_base = match (p, self.ids.rest_logs) {
            (Some(p), Some(rest_id)) => {
                let sg = skin_points_backward(&f.base, p, &f.transforms, &d_x);
                let rest = params.get(rest_id);
                for (mm, dt) in sg.d_transforms.iter().enumerate() {
                    let (dr, dh) = part_transform_vjp(&row6(rest, mm), &f.dec.parts[mm], dt);
                    for c in 0..6 {
                        out.d_rest[(mm, c)] = dr[c];
                        out.d_row[6 * (mm + 1) + c] = dh[c];
                    }
                }
                out.d_p = Some(sg.d_p);
                sg.d_vertices
            }
            _ => d_x.clone(),
        };
        if let Some(id) = self.ids.w_b {
            let (d_wb, d_alpha) = blend_displacement_backward(&self.basis, params.get(id), &f.dec.coeffs, &d_base);
            let off = 6 * (m + 1);
            out.d_row[off..off + d_alpha.len()].copy_from_slice(&d_alpha);
            out.d_wb = Some(d_wb);
        }
        out.d_x = d_x;
        Ok(out)
    }

    /// Φ forward followed by the losses; gradients cover Φ and every model
    /// tensor.
    pub fn evaluate(
        &self,
        params: &ParamSet,
        kps: &[&KeypointSet],
        rng: &mut ChaCha8Rng,
        opts: EvalOptions<'_>,
        grads: &mut Gradients,
    ) -> Result<RowsResult> {
        let input = self.encode(kps)?;
        let (rows, cache) = self.phi.forward(params, &input, opts.mode)?;
        let mut res = self.evaluate_rows(params, &rows, kps, rng, opts, grads)?;
        if opts.mode == Mode::Train {
            res.state_updates.extend(self.phi.running_updates(params, &cache));
        }
        if let Some(d) = &res.d_rows {
            self.phi.backward(params, &cache, d, grads);
        }
        Ok(res)
    }

    /// Φ in evaluation mode: twists per keypoint set.
    pub fn phi_forward(&self, params: &ParamSet, kps: &[&KeypointSet]) -> Result<Vec<PoseParams>> {
        let input = self.encode(kps)?;
        let (rows, _) = self.phi.forward(params, &input, Mode::Eval)?;
        Ok(rows.row_iter().map(|r| self.row_to_pose(&r.iter().copied().collect::<Vec<_>>())).collect())
    }

    /// Ψ in evaluation mode on one rotated point cloud.
    pub fn psi_forward(&self, params: &ParamSet, x_rotated: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        let k = self.n_keypoints();
        if x_rotated.len() != k {
            return Err(Error::Shape(format!("Ψ expects {k} points, got {}", x_rotated.len())));
        }
        let input = DMatrix::from_fn(1, 3 * k, |_, j| x_rotated[j / 3][j % 3]);
        let (out, _) = self.psi.forward(params, &input, Mode::Eval)?;
        Ok((0..k)
            .map(|j| Vector3::new(out[(0, 3 * j)], out[(0, 3 * j + 1)], out[(0, 3 * j + 2)]))
            .collect())
    }

    fn row_to_pose(&self, row: &[f64]) -> PoseParams {
        let dec = self.decode(row);
        let mut twists = vec![dec.camera];
        twists.extend(dec.parts);
        PoseParams {
            twists,
            blend_coeffs: self.config.variant.has_blendshapes().then_some(dec.coeffs),
        }
    }

    fn pose_to_row(&self, pose: &PoseParams) -> Result<Vec<f64>> {
        let m = self.config.n_transforms();
        if pose.twists.len() != m + 1 {
            return Err(Error::Shape(format!(
                "pose has {} twists, model needs {}",
                pose.twists.len(),
                m + 1
            )));
        }
        let mut row: Vec<f64> = pose.twists.iter().flat_map(|t| t.to_array()).collect();
        match (&pose.blend_coeffs, self.config.n_coeffs()) {
            (Some(c), n) if c.len() == n => row.extend(c),
            (None, 0) => {}
            (None, n) => row.extend(std::iter::repeat_n(0.0, n)),
            (Some(c), n) => {
                return Err(Error::Shape(format!("{} blend coefficients, model needs {n}", c.len())));
            }
        }
        Ok(row)
    }

    /// Poses the template for explicit pose parameters.
    pub fn pose(&self, params: &ParamSet, pose: &PoseParams) -> Result<Prediction> {
        let row = self.pose_to_row(pose)?;
        let p = self.segmentation(params);
        let f = self.forward_row(params, p.as_ref(), &row)?;
        let scale = self.scale(params);
        Ok(Prediction {
            pose: pose.clone(),
            x_camera: f.xc.iter().map(|v| v * scale).collect(),
            x_object: f.x,
            uncertainty: self.uncertainty_forward(params, pose)?,
        })
    }

    /// Amortized prediction for every keypoint set (evaluation mode).
    pub fn predict(&self, params: &ParamSet, kps: &[&KeypointSet]) -> Result<Vec<Prediction>> {
        let poses = self.phi_forward(params, kps)?;
        poses.par_iter().map(|pose| self.pose(params, pose)).collect()
    }

    /// Direct per-instance optimisation of the pose parameters with the
    /// training losses (Ψ and the model held fixed).
    pub fn fit_instance(
        &self,
        params: &ParamSet,
        kp: &KeypointSet,
        init: &PoseParams,
        cfg: &FitConfig,
    ) -> Result<(PoseParams, LossBreakdown)> {
        cfg.validate()?;
        let mut row = DMatrix::from_row_slice(1, self.config.phi_output_dim(), &self.pose_to_row(init)?);
        let mut velocity = DMatrix::zeros(1, row.ncols());
        let mut scratch = Gradients::zeros_like(params);
        let opts = EvalOptions {
            mode: Mode::Eval,
            ..Default::default()
        };
        let mut last = LossBreakdown::default();
        for it in 0..cfg.iterations {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(it as u64));
            let res = self.evaluate_rows(params, &row, &[kp], &mut rng, opts, &mut scratch)?;
            let d = res.d_rows.expect("gradient requested");
            if !d.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient("pose".into()));
            }
            velocity = velocity * cfg.momentum + d;
            row -= &velocity * cfg.learning_rate;
            last = res.breakdown;
        }
        let final_rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(cfg.iterations as u64));
        let res = self.evaluate_rows(
            params,
            &row,
            &[kp],
            final_rng,
            EvalOptions {
                want_grad: false,
                ..opts
            },
            &mut scratch,
        );
        if let Ok(r) = res {
            last = r.breakdown;
        }
        Ok((self.row_to_pose(row.row(0).iter().copied().collect::<Vec<_>>().as_slice()), last))
    }
}

fn fit_basis(template: &TriMesh, basis: Arc<SpectralBasis>, n_u: usize) -> Result<Arc<SpectralBasis>> {
    if basis.n_vertices() != template.n_vertices() {
        return Err(Error::Shape(format!(
            "basis has {} vertices, template has {}",
            basis.n_vertices(),
            template.n_vertices()
        )));
    }
    match basis.n_u().cmp(&n_u) {
        std::cmp::Ordering::Equal => Ok(basis),
        std::cmp::Ordering::Greater => Ok(Arc::new(basis.truncated(n_u)?)),
        std::cmp::Ordering::Less => Err(Error::InvalidArgument(format!(
            "basis has {} functions, n_u = {n_u} requested",
            basis.n_u()
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("fit needs lr >= 0 and momentum in [0, 1)".into()));
        }
        Ok(())
    }
}

/// The training objective over a keypoint dataset.
pub struct TrainObjective<'a> {
    pub model: &'a Model,
    pub data: &'a [KeypointSet],
}

impl BatchObjective for TrainObjective<'_> {
    fn dataset_len(&self) -> usize {
        self.data.len()
    }

    fn step(&self, params: &ParamSet, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<StepOutput> {
        let kps: Vec<&KeypointSet> = batch.iter().map(|&i| &self.data[i]).collect();
        let mut grads = Gradients::zeros_like(params);
        let res = self.model.evaluate(params, &kps, rng, EvalOptions::default(), &mut grads)?;
        Ok(StepOutput {
            breakdown: res.breakdown,
            grads,
            state_updates: res.state_updates,
        })
    }
}

/// A fixed-batch, fixed-seed view of the objective for finite-difference
/// checks. ARAP rotations are frozen at the parameters given to `new`.
pub struct CheckObjective<'a> {
    model: &'a Model,
    kps: Vec<&'a KeypointSet>,
    seed: u64,
    terms: TermMask,
    frozen: Option<Vec<Vec<Matrix3<f64>>>>,
}

impl<'a> CheckObjective<'a> {
    pub fn new(
        model: &'a Model,
        kps: Vec<&'a KeypointSet>,
        params: &ParamSet,
        seed: u64,
        terms: TermMask,
        freeze_rotations: bool,
    ) -> Result<Self> {
        let mut obj = CheckObjective {
            model,
            kps,
            seed,
            terms,
            frozen: None,
        };
        if freeze_rotations {
            let res = obj.run(params, false, &mut Gradients::zeros_like(params))?;
            obj.frozen = Some(res.arap_rotations);
        }
        Ok(obj)
    }

    fn run(&self, params: &ParamSet, want_grad: bool, grads: &mut Gradients) -> Result<RowsResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let opts = EvalOptions {
            want_grad,
            terms: self.terms,
            frozen_rotations: self.frozen.as_deref(),
            mode: Mode::Train,
        };
        self.model.evaluate(params, &self.kps, &mut rng, opts, grads)
    }
}

impl Objective for CheckObjective<'_> {
    fn value(&self, params: &ParamSet) -> Result<f64> {
        Ok(self.run(params, false, &mut Gradients::zeros_like(params))?.breakdown.total)
    }

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Gradients)> {
        let mut g = Gradients::zeros_like(params);
        let v = self.run(params, true, &mut g)?.breakdown.total;
        Ok((v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::se3_exp;
    use crate::loss::{project_ortho, pseudo_huber};
    use crate::mesh::{primitives, spectral_basis};
    use crate::optim::{check_against, GradCheckConfig};
    use nalgebra::Vector2;
    use rand::Rng;

    fn tiny(config: ModelConfig) -> (Model, ParamSet) {
        let mesh = Arc::new(primitives::icosahedron());
        let basis = Arc::new(spectral_basis(&mesh, config.n_u).unwrap());
        Model::new(mesh, basis, config, LossWeights { pseudo_huber_eps: 0.05, ..Default::default() }, 3).unwrap()
    }

    fn tiny_config(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            n_parts: 2,
            n_u: 4,
            n_blendshapes: 2,
            phi: MlpConfig { head_gain: 1.0, ..MlpConfig::narrow(16, 8, 1) },
            psi: MlpConfig { head_gain: 1.0, ..MlpConfig::narrow(16, 8, 1) },
            uncertainty_hidden: 5,
            ..Default::default()
        }
    }

    fn keypoints(model: &Model, n: usize, seed: u64) -> Vec<KeypointSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let cam = random_rotation(&mut rng);
                let y = project_ortho(model.template.vertices(), &cam)
                    .into_iter()
                    .map(|p| p + Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
                    .collect();
                let mut z = vec![true; model.n_keypoints()];
                let hide = rng.random_range(0..z.len());
                z[hide] = false;
                KeypointSet::new(y, z).unwrap()
            })
            .collect()
    }

    fn perturb(params: &mut ParamSet, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = params
            .iter()
            .filter(|(_, p)| p.trainable && (p.name.starts_with("part.") || p.name.starts_with("blend.") || p.name.starts_with("camera.")))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let v = params.get(id).map(|x| x + rng.random_range(-0.3..0.3));
            params.set(id, v).unwrap();
        }
    }

    fn check(config: ModelConfig, terms: TermMask) {
        let (model, mut params) = tiny(config);
        perturb(&mut params, 9);
        let kps = keypoints(&model, 3, 4);
        let refs: Vec<&KeypointSet> = kps.iter().collect();
        let obj = CheckObjective::new(&model, refs, &params, 11, terms, true).unwrap();
        let (_, g) = obj.value_and_grad(&params).unwrap();
        let rep = check_against(&obj, &params, &g, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{:?} {terms:?}: {rep}", model.config.variant);
    }

    #[test]
    fn gradients_of_each_term() {
        for term in ["rep", "canon", "arap", "entropy"] {
            check(tiny_config(ModelVariant::Parts), TermMask::only(term).unwrap());
        }
    }

    #[test]
    fn gradients_of_the_full_objective_for_each_variant() {
        for v in [ModelVariant::Parts, ModelVariant::NoPartsLinear, ModelVariant::PartsPlusBlendshapes] {
            check(tiny_config(v), TermMask::ALL);
        }
        check(
            ModelConfig {
                heteroscedastic: true,
                camera_scale: true,
                ..tiny_config(ModelVariant::Parts)
            },
            TermMask::ALL,
        );
    }

    #[test]
    fn refitting_rotations_breaks_the_check() {
        let (model, mut params) = tiny(tiny_config(ModelVariant::Parts));
        perturb(&mut params, 2);
        let kps = keypoints(&model, 2, 5);
        let refs: Vec<&KeypointSet> = kps.iter().collect();
        let arap = TermMask::only("arap").unwrap();
        let frozen = CheckObjective::new(&model, refs.clone(), &params, 1, arap, true).unwrap();
        let live = CheckObjective::new(&model, refs, &params, 1, arap, false).unwrap();
        let (_, g) = frozen.value_and_grad(&params).unwrap();
        assert!(check_against(&frozen, &params, &g, &GradCheckConfig::default()).unwrap().passed);
        // Same analytic gradient, but differences that re-fit rotations.
        let rep = check_against(&live, &params, &g, &GradCheckConfig::default()).unwrap();
        assert!(!rep.passed, "{rep}");
    }

    #[test]
    fn zero_phi_gives_identity_pose() {
        let (model, mut params) = tiny(tiny_config(ModelVariant::Parts));
        let ids: Vec<_> = params.iter().filter(|(_, p)| p.name.starts_with("phi.head")).map(|(id, _)| id).collect();
        for id in ids {
            let s = params.get(id).shape();
            params.set(id, DMatrix::zeros(s.0, s.1)).unwrap();
        }
        let kps = keypoints(&model, 2, 1);
        for pose in model.phi_forward(&params, &[&kps[0], &kps[1]]).unwrap() {
            assert!(pose.twists.iter().all(|t| t.to_array() == [0.0; 6]));
            assert_eq!(pose.twists.len(), 3);
        }
    }

    #[test]
    fn encoding_centres_and_masks() {
        let (model, params) = tiny(tiny_config(ModelVariant::Parts));
        let kp = &keypoints(&model, 1, 2)[0];
        let mut shifted = kp.clone();
        for y in &mut shifted.y {
            *y += Vector2::new(0.7, 0.7);
        }
        let mut garbage = kp.clone();
        let hidden = kp.z.iter().position(|z| !z).unwrap();
        garbage.y[hidden] = Vector2::new(1e3, -4.0);
        let a = model.encode(&[kp]).unwrap();
        assert!((&a - model.encode(&[&shifted]).unwrap()).amax() < 1e-12);
        assert_eq!(a, model.encode(&[&garbage]).unwrap());
        let pa = model.phi_forward(&params, &[kp]).unwrap();
        assert_eq!(pa, model.phi_forward(&params, &[&garbage]).unwrap());
        let row: Vec<f64> = pa[0].twists.iter().flat_map(|t| t.to_array()).collect();
        assert_eq!(row.len(), 6 * 3);
        assert!(row.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_psi_canonicalization_is_mean_norm() {
        let (model, mut params) = tiny(tiny_config(ModelVariant::Parts));
        let ids: Vec<_> = params.iter().filter(|(_, p)| p.name.starts_with("psi.head")).map(|(id, _)| id).collect();
        for id in ids {
            let s = params.get(id).shape();
            params.set(id, DMatrix::zeros(s.0, s.1)).unwrap();
        }
        let kps = keypoints(&model, 1, 3);
        let pose = PoseParams::identity(2);
        let pred = model.pose(&params, &pose).unwrap();
        let row = DMatrix::from_row_slice(1, 18, &[0.0; 18]);
        let res = model
            .evaluate_rows(
                &params,
                &row,
                &[&kps[0]],
                &mut ChaCha8Rng::seed_from_u64(0),
                EvalOptions {
                    want_grad: false,
                    terms: TermMask::only("canon").unwrap(),
                    mode: Mode::Eval,
                    ..Default::default()
                },
                &mut Gradients::zeros_like(&params),
            )
            .unwrap();
        let direct: f64 = pred.x_object.iter().map(|x| pseudo_huber(x.norm(), 0.05)).sum::<f64>() / 12.0;
        assert!((res.breakdown.canon - direct).abs() < 1e-12);
        assert!(model.psi_forward(&params, &pred.x_object).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn zero_uncertainty_head_predicts_ln2() {
        let (model, mut params) = tiny(ModelConfig {
            heteroscedastic: true,
            ..tiny_config(ModelVariant::Parts)
        });
        model.uncertainty_head().unwrap().zero(&mut params);
        let b = model.uncertainty_forward(&params, &PoseParams::identity(2)).unwrap().unwrap();
        assert_eq!(b.len(), 12);
        assert!(b.iter().all(|v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn identity_pose_reproduces_template() {
        let (model, params) = tiny(tiny_config(ModelVariant::Parts));
        let pred = model.pose(&params, &PoseParams::identity(2)).unwrap();
        for (a, b) in pred.x_object.iter().zip(model.template.vertices()) {
            assert!((a - b).amax() < 1e-12);
        }
        assert_eq!(pred.x_object, pred.x_camera);
    }

    #[test]
    fn evaluation_is_deterministic_across_thread_counts() {
        let (model, params) = tiny(tiny_config(ModelVariant::Parts));
        let kps = keypoints(&model, 6, 8);
        let refs: Vec<&KeypointSet> = kps.iter().collect();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut g = Gradients::zeros_like(&params);
                let r = model
                    .evaluate(&params, &refs, &mut ChaCha8Rng::seed_from_u64(5), EvalOptions::default(), &mut g)
                    .unwrap();
                (r.breakdown, g.by_name(&params, "part.w").unwrap().clone())
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn fit_recovers_a_camera_rotation() {
        let (model, params) = tiny(ModelConfig {
            n_parts: 1,
            ..tiny_config(ModelVariant::Parts)
        });
        let truth = se3_exp(&Twist::new(Vector3::new(0.2, -0.3, 0.1), Vector3::zeros()));
        let y = project_ortho(model.template.vertices(), &truth);
        let kp = KeypointSet::new(y, vec![true; 12]).unwrap();
        let weights_only_rep = Model {
            weights: LossWeights {
                w_canon: 0.0,
                w_arap: 0.0,
                w_entropy: 0.0,
                ..model.weights
            },
            ..model.clone()
        };
        let cfg = FitConfig {
            iterations: 300,
            ..Default::default()
        };
        let (_, before) = weights_only_rep
            .fit_instance(&params, &kp, &PoseParams::identity(1), &FitConfig { iterations: 0, ..cfg })
            .unwrap();
        let (pose, after) = weights_only_rep.fit_instance(&params, &kp, &PoseParams::identity(1), &cfg).unwrap();
        assert!(after.rep < 0.05 * before.rep, "{} -> {}", before.rep, after.rep);
        let pred = model.pose(&params, &pose).unwrap();
        let err: f64 = pred
            .x_camera
            .iter()
            .zip(project_ortho(model.template.vertices(), &truth))
            .map(|(a, b)| (a.xy() - b).norm())
            .sum::<f64>()
            / 12.0;
        assert!(err < 0.02, "{err}");
    }

    #[test]
    fn config_validation() {
        let c = tiny_config(ModelVariant::Parts);
        assert!(c.validate(12).is_ok());
        assert!(ModelConfig { n_u: 13, ..c.clone() }.validate(12).is_err());
        assert!(ModelConfig { n_parts: 0, ..c.clone() }.validate(12).is_err());
        assert!(ModelConfig {
            heteroscedastic: true,
            ..tiny_config(ModelVariant::NoPartsLinear)
        }
        .validate(12)
        .is_err());
        assert_eq!(c.phi_output_dim(), 18);
        assert_eq!(tiny_config(ModelVariant::NoPartsLinear).phi_output_dim(), 8);
        assert_eq!(tiny_config(ModelVariant::PartsPlusBlendshapes).phi_output_dim(), 20);
    }
}
