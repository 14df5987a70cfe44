//! Parameter storage, gradient verification and the SGD-with-momentum
//! trainer.
//!
//! Gradients are hand-derived per module (see `model`, `loss`, `nn`); the
//! finite-difference checker in this module is what keeps them honest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DMatrix<f64>,
    pub trainable: bool,
}

/// Named 2-D tensors. Names are unique and shapes never change after
/// insertion; frozen tensors (e.g. batch-norm running statistics) travel
/// with the trainable ones so a checkpoint captures the whole model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: DMatrix<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        &self.params[id.0].value
    }

    /// Replaces a tensor's value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: DMatrix<f64>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{}` is {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| &self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn n_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    fn scalar_mut(&mut self, id: ParamId, flat: usize) -> &mut f64 {
        &mut self.params[id.0].value.as_mut_slice()[flat]
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    /// Row-major.
    data: Vec<f64>,
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let recs: Vec<TensorRecord> = self
            .params
            .iter()
            .map(|p| TensorRecord {
                name: p.name.clone(),
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                trainable: p.trainable,
                data: p.value.transpose().as_slice().to_vec(),
            })
            .collect();
        recs.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let recs = Vec::<TensorRecord>::deserialize(d)?;
        let mut set = ParamSet::new();
        for r in recs {
            if r.data.len() != r.rows * r.cols {
                return Err(serde::de::Error::custom(format!(
                    "tensor `{}` has {} values for shape {}x{}",
                    r.name,
                    r.data.len(),
                    r.rows,
                    r.cols
                )));
            }
            let value = DMatrix::from_row_slice(r.rows, r.cols, &r.data);
            set.add(r.name, value, r.trainable)
                .map_err(serde::de::Error::custom)?;
        }
        Ok(set)
    }
}

/// One gradient tensor per parameter, aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<DMatrix<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            grads: params
                .params
                .iter()
                .map(|p| DMatrix::zeros(p.value.nrows(), p.value.ncols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &DMatrix<f64> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DMatrix<f64> {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &DMatrix<f64>) {
        self.grads[id.0] += g;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            *g *= s;
        }
    }

    pub fn by_name<'a>(&'a self, params: &ParamSet, name: &str) -> Option<&'a DMatrix<f64>> {
        params.id(name).map(|id| &self.grads[id.0])
    }
}

/// A differentiable scalar function of a parameter set.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;
    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, Gradients)>;
}

/// Gradient of every trainable tensor; frozen tensors get zeros.
pub fn grad(objective: &dyn Objective, params: &ParamSet) -> Result<Gradients> {
    let (_, mut g) = objective.value_and_grad(params)?;
    for (id, p) in params.iter() {
        if !p.trainable {
            g.grads[id.0].fill(0.0);
        } else if !g.grads[id.0].iter().all(|x| x.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    Ok(g)
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Tensors larger than this are checked on a random subsample of this
    /// many coordinates.
    pub max_coords_per_tensor: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_tensor: 200,
            abs_floor: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub n_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coords, max rel err {:.3e} (tol {:.0e}) {}",
            self.n_checked,
            self.max_rel_error,
            self.tol,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{}]: analytic {:.6e} numeric {:.6e}",
                w.tensor, w.flat_index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Compares `objective`'s analytic gradient with central differences.
pub fn check_gradients(
    objective: &dyn Objective,
    params: &ParamSet,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = grad(objective, params)?;
    check_against(objective, params, &analytic, cfg)
}

/// Like [`check_gradients`] but with a caller-supplied analytic gradient.
pub fn check_against(
    objective: &dyn Objective,
    params: &ParamSet,
    analytic: &Gradients,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0) {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut worst: Option<CoordCheck> = None;
    let mut n_checked = 0;
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.len();
        let coords: Vec<usize> = if n > cfg.max_coords_per_tensor {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            all.truncate(cfg.max_coords_per_tensor);
            all.sort_unstable();
            all
        } else {
            (0..n).collect()
        };
        for flat in coords {
            let orig = p.value.as_slice()[flat];
            *work.scalar_mut(id, flat) = orig + cfg.step;
            let fp = objective.value(&work)?;
            *work.scalar_mut(id, flat) = orig - cfg.step;
            let fm = objective.value(&work)?;
            *work.scalar_mut(id, flat) = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.grads[id.0].as_slice()[flat];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            n_checked += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(CoordCheck {
                    tensor: p.name.clone(),
                    flat_index: flat,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        n_checked,
        tol: cfg.tol,
        passed: max_rel_error <= cfg.tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lr_drop_factor: f64,
    pub lr_drop_at_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Learning-rate multipliers keyed by parameter-name prefix. The
    /// longest matching prefix wins; unmatched tensors use 1.
    pub lr_scale: BTreeMap<String, f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.003,
            momentum: 0.99,
            weight_decay: 0.001,
            epochs: 100,
            lr_drop_factor: 10.0,
            lr_drop_at_fraction: 0.8,
            batch_size: 512,
            seed: 0,
            lr_scale: BTreeMap::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.lr_scale.values().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("lr_scale multipliers must be finite and nonnegative");
        }
        if !(self.lr_drop_factor > 0.0) || !(0.0..=1.0).contains(&self.lr_drop_at_fraction) {
            return bad("invalid learning-rate schedule");
        }
        Ok(())
    }

    /// Multiplier for the tensor called `name`.
    pub fn lr_scale_for(&self, name: &str) -> f64 {
        self.lr_scale
            .iter()
            .filter(|(k, _)| name.starts_with(k.as_str()))
            .max_by_key(|(k, _)| k.len())
            .map_or(1.0, |(_, v)| *v)
    }

    /// Step-schedule learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop_at = (self.lr_drop_at_fraction * self.epochs as f64).floor() as usize;
        if epoch >= drop_at {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// Classic SGD with momentum and L2 weight decay folded into the gradient:
/// `g ← ∇ + λp; buf ← μ·buf + g; p ← p − lr·buf`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<DMatrix<f64>>>,
    lr_scale: Vec<f64>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    /// Per-tensor learning-rate multipliers, indexed like the parameter set.
    pub fn with_lr_scale(mut self, scale: Vec<f64>) -> Self {
        self.lr_scale = scale;
        self
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        for (i, p) in params.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let mut g = grads.grads[i].clone();
            if self.weight_decay != 0.0 {
                g += &p.value * self.weight_decay;
            }
            let buf = match self.buffers[i].take() {
                Some(mut b) => {
                    b *= self.momentum;
                    b += &g;
                    b
                }
                None => g,
            };
            let lr = lr * self.lr_scale.get(i).copied().unwrap_or(1.0);
            if lr != 0.0 {
                p.value -= &buf * lr;
            }
            self.buffers[i] = Some(buf);
        }
    }
}

/// Result of one optimisation step on a minibatch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: Gradients,
    /// New values for frozen state tensors (batch-norm running statistics).
    pub state_updates: Vec<(ParamId, DMatrix<f64>)>,
}

/// A loss over minibatches of dataset indices.
pub trait BatchObjective: Sync {
    fn dataset_len(&self) -> usize;
    fn step(&self, params: &ParamSet, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<StepOutput>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Loss became non-finite; `params` holds the state from the start of
    /// the failing epoch.
    Diverged { epoch: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub status: TrainStatus,
}

/// Seed for the per-batch RNG, derived from the run seed and position.
fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(((epoch as u64) << 32) | batch as u64);
    rng.random()
}

/// Minibatch SGD with momentum. Shuffling and per-batch randomness derive
/// from `cfg.seed` only, so identical inputs give identical histories.
pub fn train(
    mut params: ParamSet,
    objective: &dyn BatchObjective,
    cfg: &OptimizerConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = objective.dataset_len();
    if n == 0 {
        return Err(Error::InvalidArgument("dataset is empty".into()));
    }
    let scales = params.iter().map(|(_, p)| cfg.lr_scale_for(&p.name)).collect();
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay).with_lr_scale(scales);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let snapshot = params.clone();
        order.shuffle(&mut shuffle_rng);
        let mut acc = LossBreakdown::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, epoch, b));
            let out = objective.step(&params, batch, &mut rng)?;
            if !out.breakdown.total.is_finite() {
                return Ok(TrainOutcome {
                    params: snapshot,
                    history,
                    status: TrainStatus::Diverged { epoch },
                });
            }
            acc.accumulate(&out.breakdown, batch.len() as f64 / n as f64);
            sgd.step(&mut params, &out.grads, lr);
            for (id, v) in out.state_updates {
                params.set(id, v)?;
            }
        }
        let rec = EpochRecord {
            epoch,
            loss: acc,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        params,
        history,
        status: TrainStatus::Completed,
    })
}

/// `epoch,l_total,l_rep,l_canon,l_arap,l_entropy,lr` with a header row.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,l_total,l_rep,l_canon,l_arap,l_entropy,lr\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.loss.total, r.loss.rep, r.loss.canon, r.loss.arap, r.loss.entropy, r.lr
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    struct HalfSquaredNorm {
        id: ParamId,
        corrupt: f64,
    }

    impl Objective for HalfSquaredNorm {
        fn value(&self, p: &ParamSet) -> Result<f64> {
            Ok(0.5 * p.get(self.id).norm_squared())
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, Gradients)> {
            let mut g = Gradients::zeros_like(p);
            g.accumulate(self.id, &(p.get(self.id) * self.corrupt));
            Ok((self.value(p)?, g))
        }
    }

    struct Constant;

    impl Objective for Constant {
        fn value(&self, _: &ParamSet) -> Result<f64> {
            Ok(4.2)
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, Gradients)> {
            Ok((4.2, Gradients::zeros_like(p)))
        }
    }

    fn one_tensor() -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps
            .add("p", DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]), true)
            .unwrap();
        (ps, id)
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let (ps, id) = one_tensor();
        let g = grad(&HalfSquaredNorm { id, corrupt: 1.0 }, &ps).unwrap();
        assert_eq!(g.get(id), ps.get(id));
        let rep = check_gradients(&HalfSquaredNorm { id, corrupt: 1.0 }, &ps, &GradCheckConfig::default())
            .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep}");
        assert!(rep.passed);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (ps, id) = one_tensor();
        assert_eq!(grad(&Constant, &ps).unwrap().get(id).amax(), 0.0);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (ps, id) = one_tensor();
        let rep = check_gradients(&HalfSquaredNorm { id, corrupt: 1.01 }, &ps, &GradCheckConfig::default())
            .unwrap();
        assert!(!rep.passed);
        assert!((rep.max_rel_error - 0.01 / 1.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (ps, id) = one_tensor();
        let err = grad(&HalfSquaredNorm { id, corrupt: f64::NAN }, &ps).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let mut ps = ParamSet::new();
        let id = ps.add("big", DMatrix::from_element(30, 30, 0.3), true).unwrap();
        let rep = check_gradients(&HalfSquaredNorm { id, corrupt: 1.0 }, &ps, &GradCheckConfig::default())
            .unwrap();
        assert_eq!(rep.n_checked, 200);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut ps, _) = one_tensor();
        assert!(ps.add("p", DMatrix::zeros(1, 1), true).is_err());
    }

    #[test]
    fn paramset_json_round_trip() {
        let (mut ps, _) = one_tensor();
        ps.add("frozen", DMatrix::from_row_slice(1, 3, &[0.1, 0.2, 0.3]), false)
            .unwrap();
        let back: ParamSet = serde_json::from_str(&serde_json::to_string(&ps).unwrap()).unwrap();
        assert_eq!(ps, back);
    }

    #[test]
    fn lr_scale_uses_longest_prefix() {
        let mut c = OptimizerConfig::default();
        c.lr_scale.insert("part.".into(), 10.0);
        c.lr_scale.insert("part.w".into(), 100.0);
        assert_eq!(c.lr_scale_for("part.w"), 100.0);
        assert_eq!(c.lr_scale_for("part.rest_logs"), 10.0);
        assert_eq!(c.lr_scale_for("phi.head.w"), 1.0);
        c.lr_scale.insert("phi".into(), -1.0);
        assert!(c.validate().is_err());

        let mut ps = ParamSet::new();
        let a = ps.add("a", DMatrix::from_element(1, 1, 1.0), true).unwrap();
        let b = ps.add("b", DMatrix::from_element(1, 1, 1.0), true).unwrap();
        let mut g = Gradients::zeros_like(&ps);
        g.accumulate(a, &DMatrix::from_element(1, 1, 1.0));
        g.accumulate(b, &DMatrix::from_element(1, 1, 1.0));
        Sgd::new(0.0, 0.0).with_lr_scale(vec![1.0, 0.0]).step(&mut ps, &g, 0.5);
        assert_eq!((ps.get(a)[0], ps.get(b)[0]), (0.5, 1.0));
    }

    #[test]
    fn paper_defaults() {
        let c = OptimizerConfig::default();
        assert_eq!(
            (c.learning_rate, c.momentum, c.weight_decay, c.batch_size),
            (0.003, 0.99, 0.001, 512)
        );
        assert_eq!((c.lr_drop_factor, c.lr_drop_at_fraction), (10.0, 0.8));
        let c = OptimizerConfig { epochs: 10, ..c };
        assert_eq!(c.lr_at(7), 0.003);
        assert!((c.lr_at(8) - 0.0003).abs() < 1e-18);
    }

    /// `f(p) = p²/2` over a one-element dataset.
    struct Scalar {
        id: ParamId,
    }

    impl BatchObjective for Scalar {
        fn dataset_len(&self) -> usize {
            1
        }
        fn step(&self, p: &ParamSet, _: &[usize], _: &mut ChaCha8Rng) -> Result<StepOutput> {
            let x = p.get(self.id)[(0, 0)];
            let mut grads = Gradients::zeros_like(p);
            grads.get_mut(self.id)[(0, 0)] = x;
            let v = 0.5 * x * x;
            Ok(StepOutput {
                breakdown: LossBreakdown {
                    total: v,
                    rep: v,
                    ..Default::default()
                },
                grads,
                state_updates: vec![],
            })
        }
    }

    fn scalar_params(x: f64) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.add("x", DMatrix::from_element(1, 1, x), true).unwrap();
        (ps, id)
    }

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let (ps, id) = scalar_params(1.2345);
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..Default::default()
        };
        let out = train(ps.clone(), &Scalar { id }, &cfg, |_| {}).unwrap();
        assert_eq!(out.params, ps);
    }

    #[test]
    fn plain_gradient_descent_is_geometric() {
        let (ps, id) = scalar_params(1.0);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 30,
            lr_drop_at_fraction: 1.0,
            batch_size: 1,
            ..Default::default()
        };
        let out = train(ps, &Scalar { id }, &cfg, |_| {}).unwrap();
        let x = out.params.get(id)[(0, 0)];
        assert!((x - 0.9f64.powi(30)).abs() < 1e-15);
        for (t, rec) in out.history.iter().enumerate() {
            let xt = 0.9f64.powi(t as i32);
            assert!((rec.loss.total - 0.5 * xt * xt).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_decay_is_added_to_the_gradient() {
        let (mut ps, id) = scalar_params(2.0);
        let mut sgd = Sgd::new(0.0, 0.5);
        let zero = Gradients::zeros_like(&ps);
        sgd.step(&mut ps, &zero, 0.1);
        assert!((ps.get(id)[(0, 0)] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let (mut ps, id) = scalar_params(0.0);
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut g = Gradients::zeros_like(&ps);
        g.get_mut(id)[(0, 0)] = 1.0;
        sgd.step(&mut ps, &g, 1.0);
        sgd.step(&mut ps, &g, 1.0);
        assert!((ps.get(id)[(0, 0)] + 1.0 + 1.9).abs() < 1e-15);
    }

    #[test]
    fn divergence_returns_last_good_params() {
        let (ps, id) = scalar_params(1.0);
        let cfg = OptimizerConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 1,
            ..Default::default()
        };
        let out = train(ps, &Scalar { id }, &cfg, |_| {}).unwrap();
        let TrainStatus::Diverged { epoch } = out.status else {
            panic!("expected divergence")
        };
        assert!(epoch > 0);
        assert!(out.params.get(id)[(0, 0)].is_finite());
        assert_eq!(out.history.len(), epoch);
    }

    #[test]
    fn history_csv_header() {
        let s = history_csv(&[]);
        assert_eq!(s, "epoch,l_total,l_rep,l_canon,l_arap,l_entropy,lr\n");
    }
}
