//! Batched multilayer perceptrons with hand-written backward passes.
//!
//! Activations are `B × features` matrices (one row per instance). Weights
//! live in a [`ParamSet`]; the network structs only hold [`ParamId`]s.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Gradients, ParamId, ParamSet};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are refreshed in the cache.
    Train,
    /// Running statistics; output rows are independent of each other.
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let std = gain / (fan_in as f64).sqrt();
        let w = DMatrix::from_fn(fan_in, fan_out, |_, _| {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        Ok(Linear {
            w: params.add(format!("{name}.w"), w, true)?,
            b: params.add(format!("{name}.b"), DMatrix::zeros(1, fan_out), true)?,
        })
    }

    fn forward(&self, params: &ParamSet, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * params.get(self.w);
        let b = params.get(self.b);
        for mut row in y.row_iter_mut() {
            row += b;
        }
        y
    }

    fn backward(
        &self,
        params: &ParamSet,
        x: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        grads: &mut Gradients,
    ) -> DMatrix<f64> {
        *grads.get_mut(self.w) += x.transpose() * dy;
        let db = DMatrix::from_fn(1, dy.ncols(), |_, j| dy.column(j).sum());
        grads.accumulate(self.b, &db);
        dy * params.get(self.w).transpose()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: DMatrix<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

impl BatchNorm {
    fn new(params: &mut ParamSet, name: &str, n: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: params.add(format!("{name}.gamma"), DMatrix::from_element(1, n, 1.0), true)?,
            beta: params.add(format!("{name}.beta"), DMatrix::zeros(1, n), true)?,
            running_mean: params.add(format!("{name}.running_mean"), DMatrix::zeros(1, n), false)?,
            running_var: params.add(
                format!("{name}.running_var"),
                DMatrix::from_element(1, n, 1.0),
                false,
            )?,
        })
    }

    fn forward(&self, params: &ParamSet, x: &DMatrix<f64>, mode: Mode) -> (DMatrix<f64>, BnCache) {
        let (b, n) = x.shape();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => (0..n)
                .map(|j| {
                    let col = x.column(j);
                    let m = col.sum() / b as f64;
                    let v = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / b as f64;
                    (m, v)
                })
                .unzip(),
            Mode::Eval => (
                params.get(self.running_mean).iter().copied().collect(),
                params.get(self.running_var).iter().copied().collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let x_hat = DMatrix::from_fn(b, n, |i, j| (x[(i, j)] - mean[j]) * inv_std[j]);
        let gamma = params.get(self.gamma);
        let beta = params.get(self.beta);
        let y = DMatrix::from_fn(b, n, |i, j| x_hat[(i, j)] * gamma[j] + beta[j]);
        (
            y,
            BnCache {
                x_hat,
                inv_std,
                mode,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &BnCache,
        dy: &DMatrix<f64>,
        grads: &mut Gradients,
    ) -> DMatrix<f64> {
        let (b, n) = dy.shape();
        let gamma = params.get(self.gamma);
        {
            let dg = grads.get_mut(self.gamma);
            for j in 0..n {
                dg[j] += dy.column(j).dot(&cache.x_hat.column(j));
            }
        }
        {
            let dbeta = grads.get_mut(self.beta);
            for j in 0..n {
                dbeta[j] += dy.column(j).sum();
            }
        }
        match cache.mode {
            Mode::Eval => DMatrix::from_fn(b, n, |i, j| dy[(i, j)] * gamma[j] * cache.inv_std[j]),
            Mode::Train => {
                let bf = b as f64;
                let mut dx = DMatrix::zeros(b, n);
                for j in 0..n {
                    let g = gamma[j];
                    let s1: f64 = dy.column(j).sum() * g;
                    let s2: f64 = dy.column(j).dot(&cache.x_hat.column(j)) * g;
                    for i in 0..b {
                        let dxh = dy[(i, j)] * g;
                        dx[(i, j)] =
                            cache.inv_std[j] / bf * (bf * dxh - s1 - cache.x_hat[(i, j)] * s2);
                    }
                }
                dx
            }
        }
    }

    fn running_update(&self, params: &ParamSet, cache: &BnCache, batch: usize) -> [(ParamId, DMatrix<f64>); 2] {
        let unbias = if batch > 1 {
            batch as f64 / (batch - 1) as f64
        } else {
            1.0
        };
        let rm = params.get(self.running_mean);
        let rv = params.get(self.running_var);
        let n = rm.len();
        let new_mean = DMatrix::from_fn(1, n, |_, j| {
            (1.0 - BN_MOMENTUM) * rm[j] + BN_MOMENTUM * cache.batch_mean[j]
        });
        let new_var = DMatrix::from_fn(1, n, |_, j| {
            (1.0 - BN_MOMENTUM) * rv[j] + BN_MOMENTUM * cache.batch_var[j] * unbias
        });
        [(self.running_mean, new_mean), (self.running_var, new_var)]
    }
}

/// Linear → batch-norm → ReLU.
#[derive(Debug, Clone, Copy)]
struct Layer {
    lin: Linear,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: DMatrix<f64>,
    bn: BnCache,
    /// Post-ReLU output; its positive entries double as the ReLU mask.
    out: DMatrix<f64>,
}

impl Layer {
    fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Layer {
            lin: Linear::new(params, &format!("{name}.lin"), fan_in, fan_out, 1.0, rng)?,
            bn: BatchNorm::new(params, &format!("{name}.bn"), fan_out)?,
        })
    }

    fn forward(&self, params: &ParamSet, x: DMatrix<f64>, mode: Mode) -> LayerCache {
        let z = self.lin.forward(params, &x);
        let (mut y, bn) = self.bn.forward(params, &z, mode);
        y.apply(|v| *v = v.max(0.0));
        LayerCache { input: x, bn, out: y }
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &LayerCache,
        dy: &DMatrix<f64>,
        grads: &mut Gradients,
    ) -> DMatrix<f64> {
        let dz = dy.zip_map(&cache.out, |d, o| if o > 0.0 { d } else { 0.0 });
        let dlin = self.bn.backward(params, &cache.bn, &dz, grads);
        self.lin.backward(params, &cache.input, &dlin, grads)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub width: usize,
    pub hidden: usize,
    pub n_blocks: usize,
    /// Scale of the output layer's initial weights relative to 1/√fan_in.
    pub head_gain: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            width: 1024,
            hidden: 256,
            n_blocks: 6,
            head_gain: 0.01,
        }
    }
}

impl MlpConfig {
    pub fn narrow(width: usize, hidden: usize, n_blocks: usize) -> Self {
        MlpConfig {
            width,
            hidden,
            n_blocks,
            ..Default::default()
        }
    }
}

/// Stem layer to `width`, then residual blocks `width→hidden→hidden→width`
/// (each layer linear + batch-norm + ReLU, skip added after the third),
/// then a linear head.
#[derive(Debug, Clone)]
pub struct ResidualMlp {
    pub input_dim: usize,
    pub output_dim: usize,
    pub config: MlpConfig,
    stem: Layer,
    blocks: Vec<[Layer; 3]>,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    stem: LayerCache,
    blocks: Vec<[LayerCache; 3]>,
    /// Input to the head (output of the last block).
    features: DMatrix<f64>,
    batch: usize,
}

impl ResidualMlp {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        config: MlpConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || config.width == 0 || config.hidden == 0 {
            return Err(Error::InvalidArgument("network dimensions must be positive".into()));
        }
        let stem = Layer::new(params, &format!("{name}.stem"), input_dim, config.width, rng)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let p = format!("{name}.block{b}");
            blocks.push([
                Layer::new(params, &format!("{p}.0"), config.width, config.hidden, rng)?,
                Layer::new(params, &format!("{p}.1"), config.hidden, config.hidden, rng)?,
                Layer::new(params, &format!("{p}.2"), config.hidden, config.width, rng)?,
            ]);
        }
        let head = Linear::new(
            params,
            &format!("{name}.head"),
            config.width,
            output_dim,
            config.head_gain,
            rng,
        )?;
        Ok(ResidualMlp {
            input_dim,
            output_dim,
            config,
            stem,
            blocks,
            head,
        })
    }

    /// Rebinds to tensors already present in `params` (e.g. a loaded
    /// checkpoint), checking their shapes.
    pub fn bind(
        params: &ParamSet,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        config: MlpConfig,
    ) -> Result<Self> {
        let lookup = |n: String, shape: (usize, usize)| -> Result<ParamId> {
            let id = params
                .id(&n)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{n}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor `{n}` has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let layer = |n: String, i: usize, o: usize| -> Result<Layer> {
            Ok(Layer {
                lin: Linear {
                    w: lookup(format!("{n}.lin.w"), (i, o))?,
                    b: lookup(format!("{n}.lin.b"), (1, o))?,
                },
                bn: BatchNorm {
                    gamma: lookup(format!("{n}.bn.gamma"), (1, o))?,
                    beta: lookup(format!("{n}.bn.beta"), (1, o))?,
                    running_mean: lookup(format!("{n}.bn.running_mean"), (1, o))?,
                    running_var: lookup(format!("{n}.bn.running_var"), (1, o))?,
                },
            })
        };
        let stem = layer(format!("{name}.stem"), input_dim, config.width)?;
        let mut blocks = Vec::new();
        for b in 0..config.n_blocks {
            let p = format!("{name}.block{b}");
            blocks.push([
                layer(format!("{p}.0"), config.width, config.hidden)?,
                layer(format!("{p}.1"), config.hidden, config.hidden)?,
                layer(format!("{p}.2"), config.hidden, config.width)?,
            ]);
        }
        let head = Linear {
            w: lookup(format!("{name}.head.w"), (config.width, output_dim))?,
            b: lookup(format!("{name}.head.b"), (1, output_dim))?,
        };
        Ok(ResidualMlp {
            input_dim,
            output_dim,
            config,
            stem,
            blocks,
            head,
        })
    }

    pub fn forward(
        &self,
        params: &ParamSet,
        x: &DMatrix<f64>,
        mode: Mode,
    ) -> Result<(DMatrix<f64>, MlpCache)> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let stem = self.stem.forward(params, x.clone(), mode);
        let mut h = stem.out.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let c0 = block[0].forward(params, h.clone(), mode);
            let c1 = block[1].forward(params, c0.out.clone(), mode);
            let c2 = block[2].forward(params, c1.out.clone(), mode);
            h += &c2.out;
            blocks.push([c0, c1, c2]);
        }
        let out = self.head.forward(params, &h);
        Ok((
            out,
            MlpCache {
                stem,
                blocks,
                features: h,
                batch: x.nrows(),
            },
        ))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &MlpCache,
        d_out: &DMatrix<f64>,
        grads: &mut Gradients,
    ) -> DMatrix<f64> {
        let mut dh = self.head.backward(params, &cache.features, d_out, grads);
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let d2 = block[2].backward(params, &c[2], &dh, grads);
            let d1 = block[1].backward(params, &c[1], &d2, grads);
            let d0 = block[0].backward(params, &c[0], &d1, grads);
            dh += d0;
        }
        self.stem.backward(params, &cache.stem, &dh, grads)
    }

    /// Running-statistics updates implied by a train-mode forward pass.
    pub fn running_updates(&self, params: &ParamSet, cache: &MlpCache) -> Vec<(ParamId, DMatrix<f64>)> {
        let mut out = Vec::new();
        let b = cache.batch;
        out.extend(self.stem.bn.running_update(params, &cache.stem.bn, b));
        for (block, c) in self.blocks.iter().zip(&cache.blocks) {
            for (layer, lc) in block.iter().zip(c) {
                out.extend(layer.bn.running_update(params, &lc.bn, b));
            }
        }
        out
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two-layer perceptron (`in → hidden → 1`, ReLU in between) with a softplus
/// output, so every prediction is strictly positive.
#[derive(Debug, Clone)]
pub struct UncertaintyHead {
    pub input_dim: usize,
    pub hidden: usize,
    l1: Linear,
    l2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: DMatrix<f64>,
    hidden: DMatrix<f64>,
    pre: DMatrix<f64>,
}

impl UncertaintyHead {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(UncertaintyHead {
            input_dim,
            hidden,
            l1: Linear::new(params, &format!("{name}.l1"), input_dim, hidden, 1.0, rng)?,
            l2: Linear::new(params, &format!("{name}.l2"), hidden, 1, 0.1, rng)?,
        })
    }

    pub fn bind(params: &ParamSet, name: &str, input_dim: usize, hidden: usize) -> Result<Self> {
        let get = |n: &str| {
            params
                .id(&format!("{name}.{n}"))
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}.{n}`")))
        };
        let head = UncertaintyHead {
            input_dim,
            hidden,
            l1: Linear {
                w: get("l1.w")?,
                b: get("l1.b")?,
            },
            l2: Linear {
                w: get("l2.w")?,
                b: get("l2.b")?,
            },
        };
        if params.get(head.l1.w).shape() != (input_dim, hidden) {
            return Err(Error::Shape(format!("`{name}.l1.w` has the wrong shape")));
        }
        Ok(head)
    }

    pub fn forward(&self, params: &ParamSet, x: &DMatrix<f64>) -> Result<(Vec<f64>, HeadCache)> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!(
                "uncertainty head expects {} inputs, got {}",
                self.input_dim,
                x.ncols()
            )));
        }
        let mut hidden = self.l1.forward(params, x);
        hidden.apply(|v| *v = v.max(0.0));
        let pre = self.l2.forward(params, &hidden);
        let b = pre.iter().map(|&v| softplus(v)).collect();
        Ok((
            b,
            HeadCache {
                input: x.clone(),
                hidden,
                pre,
            },
        ))
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &HeadCache,
        d_b: &[f64],
        grads: &mut Gradients,
    ) -> DMatrix<f64> {
        let d_pre = DMatrix::from_fn(d_b.len(), 1, |i, _| d_b[i] * sigmoid(cache.pre[(i, 0)]));
        let dh = self.l2.backward(params, &cache.hidden, &d_pre, grads);
        let dh = dh.zip_map(&cache.hidden, |d, h| if h > 0.0 { d } else { 0.0 });
        self.l1.backward(params, &cache.input, &dh, grads)
    }

    /// Zeroes every weight; the head then predicts `ln 2` everywhere.
    pub fn zero(&self, params: &mut ParamSet) {
        for id in [self.l1.w, self.l1.b, self.l2.w, self.l2.b] {
            let shape = params.get(id).shape();
            params.set(id, DMatrix::zeros(shape.0, shape.1)).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{check_against, GradCheckConfig, Objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random_input(b: usize, n: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(b, n, |_, _| r.random_range(-1.0..1.0))
    }

    /// `Σ c ⊙ net(x)` for a fixed random `c` and input.
    struct Probe<'a> {
        net: &'a ResidualMlp,
        x: DMatrix<f64>,
        c: DMatrix<f64>,
        mode: Mode,
    }

    impl Objective for Probe<'_> {
        fn value(&self, p: &ParamSet) -> Result<f64> {
            let (y, _) = self.net.forward(p, &self.x, self.mode)?;
            Ok(y.component_mul(&self.c).sum())
        }
        fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, Gradients)> {
            let (y, cache) = self.net.forward(p, &self.x, self.mode)?;
            let mut g = Gradients::zeros_like(p);
            self.net.backward(p, &cache, &self.c, &mut g);
            Ok((y.component_mul(&self.c).sum(), g))
        }
    }

    fn perturb_bn(params: &mut ParamSet, r: &mut ChaCha8Rng) {
        let ids: Vec<_> = params
            .iter()
            .filter(|(_, p)| p.name.contains(".bn.") || p.name.ends_with(".b"))
            .map(|(id, p)| (id, p.name.clone(), p.value.shape()))
            .collect();
        for (id, name, (rows, cols)) in ids {
            let base = if name.ends_with("gamma") || name.ends_with("running_var") { 1.0 } else { 0.0 };
            params
                .set(id, DMatrix::from_fn(rows, cols, |_, _| base + r.random_range(-0.3..0.3)))
                .unwrap();
        }
    }

    #[test]
    fn mlp_gradients_train_and_eval() {
        let mut r = rng();
        for mode in [Mode::Train, Mode::Eval] {
            let mut params = ParamSet::new();
            let cfg = MlpConfig { head_gain: 1.0, ..MlpConfig::narrow(8, 5, 2) };
            let net = ResidualMlp::new(&mut params, "net", 6, 4, cfg, &mut r).unwrap();
            perturb_bn(&mut params, &mut r);
            let probe = Probe {
                net: &net,
                x: random_input(7, 6, &mut r),
                c: random_input(7, 4, &mut r),
                mode,
            };
            let (_, g) = probe.value_and_grad(&params).unwrap();
            let rep = check_against(&probe, &params, &g, &GradCheckConfig::default()).unwrap();
            assert!(rep.passed, "{mode:?}: {rep}");
        }
    }

    #[test]
    fn mlp_input_gradient() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let cfg = MlpConfig { head_gain: 1.0, ..MlpConfig::narrow(8, 5, 1) };
        let net = ResidualMlp::new(&mut params, "net", 3, 2, cfg, &mut r).unwrap();
        let x = random_input(5, 3, &mut r);
        let c = random_input(5, 2, &mut r);
        let (_, cache) = net.forward(&params, &x, Mode::Train).unwrap();
        let dx = net.backward(&params, &cache, &c, &mut Gradients::zeros_like(&params));
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[(i, j)] += h;
                xm[(i, j)] -= h;
                let fp = net.forward(&params, &xp, Mode::Train).unwrap().0.component_mul(&c).sum();
                let fm = net.forward(&params, &xm, Mode::Train).unwrap().0.component_mul(&c).sum();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - dx[(i, j)]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn eval_mode_rows_are_independent_of_batch() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let net = ResidualMlp::new(&mut params, "n", 4, 3, MlpConfig::narrow(6, 4, 2), &mut r).unwrap();
        perturb_bn(&mut params, &mut r);
        let x = random_input(5, 4, &mut r);
        let (full, _) = net.forward(&params, &x, Mode::Eval).unwrap();
        let (first, _) = net.forward(&params, &x.rows(0, 1).into_owned(), Mode::Eval).unwrap();
        assert!((full.row(0) - first.row(0)).amax() < 1e-14);
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let net = ResidualMlp::new(&mut params, "n", 2, 1, MlpConfig::narrow(3, 2, 0), &mut r).unwrap();
        let x = random_input(4, 2, &mut r);
        let (_, cache) = net.forward(&params, &x, Mode::Train).unwrap();
        let ups = net.running_updates(&params, &cache);
        assert_eq!(ups.len(), 2);
        for (id, v) in ups {
            assert_eq!(params.get(id).shape(), v.shape());
            params.set(id, v).unwrap();
        }
        let rm = params.by_name("n.stem.bn.running_mean").unwrap();
        assert!(rm.value.amax() > 0.0);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let net = ResidualMlp::new(&mut params, "n", 4, 3, MlpConfig::narrow(6, 4, 1), &mut r).unwrap();
        let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let (a, b) = params.get(id).shape();
            params.set(id, DMatrix::zeros(a, b)).unwrap();
        }
        let (y, _) = net.forward(&params, &random_input(3, 4, &mut r), Mode::Train).unwrap();
        assert_eq!(y.amax(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let net = ResidualMlp::new(&mut params, "n", 4, 3, MlpConfig::narrow(6, 4, 1), &mut r).unwrap();
        assert!(matches!(
            net.forward(&params, &DMatrix::zeros(2, 5), Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bind_recovers_network() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let cfg = MlpConfig::narrow(6, 4, 2);
        let net = ResidualMlp::new(&mut params, "n", 4, 3, cfg, &mut r).unwrap();
        let again = ResidualMlp::bind(&params, "n", 4, 3, cfg).unwrap();
        let x = random_input(3, 4, &mut r);
        assert_eq!(
            net.forward(&params, &x, Mode::Eval).unwrap().0,
            again.forward(&params, &x, Mode::Eval).unwrap().0
        );
        assert!(ResidualMlp::bind(&params, "n", 5, 3, cfg).is_err());
    }

    #[test]
    fn head_is_positive_and_zero_head_gives_ln2() {
        let mut r = rng();
        let mut params = ParamSet::new();
        let head = UncertaintyHead::new(&mut params, "u", 7, 5, &mut r).unwrap();
        let x = random_input(20, 7, &mut r) * 10.0;
        let (b, _) = head.forward(&params, &x).unwrap();
        assert!(b.iter().all(|&v| v > 0.0));
        head.zero(&mut params);
        let (b, _) = head.forward(&params, &x).unwrap();
        for v in b {
            assert!((v - 2f64.ln()).abs() < 1e-15);
            assert!((v - 0.693147).abs() < 1e-6);
        }
    }

    #[test]
    fn head_gradients() {
        struct HeadProbe<'a> {
            head: &'a UncertaintyHead,
            x: DMatrix<f64>,
            c: Vec<f64>,
        }
        impl Objective for HeadProbe<'_> {
            fn value(&self, p: &ParamSet) -> Result<f64> {
                let (b, _) = self.head.forward(p, &self.x)?;
                Ok(b.iter().zip(&self.c).map(|(a, c)| a * c).sum())
            }
            fn value_and_grad(&self, p: &ParamSet) -> Result<(f64, Gradients)> {
                let (b, cache) = self.head.forward(p, &self.x)?;
                let mut g = Gradients::zeros_like(p);
                self.head.backward(p, &cache, &self.c, &mut g);
                Ok((b.iter().zip(&self.c).map(|(a, c)| a * c).sum(), g))
            }
        }
        let mut r = rng();
        let mut params = ParamSet::new();
        let head = UncertaintyHead::new(&mut params, "u", 4, 6, &mut r).unwrap();
        let probe = HeadProbe {
            head: &head,
            x: random_input(9, 4, &mut r),
            c: (0..9).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let (_, g) = probe.value_and_grad(&params).unwrap();
        let rep = check_against(&probe, &params, &g, &GradCheckConfig::default()).unwrap();
        assert!(rep.passed, "{rep}");
    }
}
