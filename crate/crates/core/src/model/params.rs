use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use super::{decoder_stages, ModelCfg};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::{Graph, Tensor, Var};

/// Default initial temperature; similarities are divided by it.
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

const INIT_STD: f64 = 0.02;

/// Every learnable tensor, keyed by a dotted name.
///
/// Iteration order is the lexicographic name order, which fixes the layout of
/// optimizer state and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn log_temperature(&self) -> f64 {
        self.tensors["log_temperature"].item()
    }

    pub fn tau(&self) -> f64 {
        self.log_temperature().exp()
    }

    /// Clamps `exp(log_temperature)` into `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_temperature(&mut self) {
        if let Some(t) = self.tensors.get_mut("log_temperature") {
            let v = &mut t.data_mut()[0];
            *v = v.clamp(TAU_MIN.ln(), TAU_MAX.ln());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    /// Inserts every parameter into `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.param(t))).collect() }
    }

    /// Inserts every parameter as an untracked constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, t)| (k.clone(), g.constant(t))).collect() }
    }

    /// Copies gradients for bound parameters out of `g`; unreached parameters get zeros.
    pub fn collect_grads(&mut self, g: &Graph, bound: &Bound) {
        for (name, t) in self.tensors.iter_mut() {
            let grad = bound
                .vars
                .get(name)
                .and_then(|&v| g.grad(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(grad).expect("graph grads match parameter shapes");
        }
    }
}

/// Graph handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::BadConfig(format!("parameter `{name}` is not bound")))
    }
}

fn trunc_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect()
}

struct Builder<'a> {
    rng: &'a mut Rng,
    out: BTreeMap<String, Tensor>,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) {
        let data = trunc_normal(self.rng, rows * cols);
        self.out.insert(name, Tensor::matrix(rows, cols, data).expect("positive extents"));
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) {
        self.out.insert(name, Tensor::full(vec![rows, cols], value));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.weight(format!("{prefix}.w"), fan_in, fan_out);
        self.constant(format!("{prefix}.b"), 1, fan_out, 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.constant(format!("{prefix}.g"), 1, d, 1.0);
        self.constant(format!("{prefix}.b"), 1, d, 0.0);
    }

    fn transformer(&mut self, prefix: &str, d: usize, layers: usize, mlp_ratio: usize) {
        for l in 0..layers {
            let p = format!("{prefix}.block{l}");
            self.layer_norm(&format!("{p}.ln1"), d);
            self.linear(&format!("{p}.qkv"), d, 3 * d);
            self.linear(&format!("{p}.proj"), d, d);
            self.layer_norm(&format!("{p}.ln2"), d);
            self.linear(&format!("{p}.mlp1"), d, mlp_ratio * d);
            self.linear(&format!("{p}.mlp2"), mlp_ratio * d, d);
        }
        self.layer_norm(&format!("{prefix}.ln_f"), d);
        self.linear(&format!("{prefix}.head"), d, d);
    }
}

/// Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit
/// layer-norm gains, and `log_temperature = ln(cfg.tau_init)`.
pub fn init_params(cfg: &ModelCfg, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = stream(seed, "init");
    let mut b = Builder { rng: &mut rng, out: BTreeMap::new() };
    let v = &cfg.visual;
    let d = v.embed_dim;

    b.linear("visual.patch", v.patch_volume(), d);
    if v.positional {
        b.weight("visual.pos".into(), v.n_tokens(), d);
    }
    b.transformer("visual", d, v.n_layers, v.mlp_ratio);

    for (s, stage) in decoder_stages(v).iter().enumerate() {
        b.weight(format!("decoder.stage{s}.w"), stage.in_channels, stage.factor.pow(3) * stage.out_channels);
        b.constant(format!("decoder.stage{s}.b"), 1, stage.out_channels, 0.0);
    }

    let n = &cfg.network;
    b.linear("network.node", n.n_rois, n.embed_dim);
    if n.positional {
        b.weight("network.pos".into(), n.n_rois, n.embed_dim);
    }
    b.transformer("network", n.embed_dim, n.n_layers, n.mlp_ratio);

    b.linear("inm", 2 * d, 2);
    let mut out = b.out;
    out.insert("log_temperature".into(), Tensor::scalar(cfg.tau_init.ln()));
    Ok(ModelParams { tensors: out })
}
