use serde::{Deserialize, Serialize};

use super::losses::{inc_loss_graph, inm_loss_graph, mim_loss_graph};
use super::{sample_hard_negatives, LossReport};
use crate::error::{Error, Result};
use crate::model::{
    network_forward, node_feature_batch, patchify, visual_decode_forward, visual_forward, Bound, ModelCfg,
    ModelParams,
};
use crate::rng::indexed_seed;
use crate::synth::{augment_volume, mask_volume, resize_volume, AugmentCfg, MaskSpec, PairedSample, Volume3D};
use crate::tensor::{Graph, Tensor, Var};

/// Loss weights and the stochastic input pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveCfg {
    pub alpha: f64,
    pub beta: f64,
    pub mask_ratio: f64,
    pub augment: AugmentCfg,
}

impl Default for ObjectiveCfg {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, mask_ratio: 0.30, augment: AugmentCfg::default() }
    }
}

impl ObjectiveCfg {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::BadRatio(self.mask_ratio));
        }
        self.augment.validate()
    }
}

/// A finished forward pass, ready for `graph.backward(loss)`.
#[derive(Debug)]
pub struct LossForward {
    pub graph: Graph,
    pub bound: Bound,
    pub loss: Var,
    pub report: LossReport,
}

fn prepare(sample: &PairedSample, cfg: &ModelCfg, obj: &ObjectiveCfg, seed: u64, i: usize) -> Result<Volume3D> {
    let aug = obj.augment.with_seed(indexed_seed(seed, "augment", i as u64));
    let v = augment_volume(&sample.volume, &aug)?;
    resize_volume(&v, cfg.visual.input_dims)
}

/// Full forward pass of the combined objective on one batch.
///
/// Augment each volume, mask a copy, encode the augmented and masked images
/// with the shared visual encoder, decode the masked tokens, encode FCNs, and
/// combine `inc + alpha * mim + beta * inm`. All randomness derives from `seed`.
pub fn total_loss(
    batch: &[&PairedSample],
    params: &ModelParams,
    cfg: &ModelCfg,
    obj: &ObjectiveCfg,
    seed: u64,
) -> Result<LossForward> {
    obj.validate()?;
    let k = batch.len();
    if k < 2 {
        return Err(Error::BadHyper(format!("contrastive batch needs at least 2 samples, got {k}")));
    }
    let use_mim = obj.alpha > 0.0;
    let use_inm = obj.beta > 0.0;

    let raw: Vec<Volume3D> =
        batch.iter().enumerate().map(|(i, s)| prepare(s, cfg, obj, seed, i)).collect::<Result<_>>()?;
    let mut images: Vec<&Volume3D> = raw.iter().collect();
    let masked: Vec<Volume3D> = if use_mim {
        raw.iter()
            .enumerate()
            .map(|(i, v)| {
                let spec = MaskSpec::new(obj.mask_ratio, indexed_seed(seed, "mask", i as u64));
                mask_volume(v, &spec).map(|(m, _)| m)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    images.extend(masked.iter());

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let patches = g.constant(&patchify(&images, &cfg.visual)?);
    let vis = visual_forward(&mut g, &bound, &cfg.visual, patches, images.len())?;
    let first: Vec<usize> = (0..k).collect();
    let v = g.select_rows(vis.embedding, &first)?;

    let fcns: Vec<_> = batch.iter().map(|s| &s.fcn).collect();
    let feats = g.constant(&node_feature_batch(&fcns, &cfg.network)?);
    let w = network_forward(&mut g, &bound, &cfg.network, feats, k)?;

    let log_t = bound.var("log_temperature")?;
    let neg = g.scale(log_t, -1.0);
    let inv_tau = g.exp(neg);
    let tau = 1.0 / g.scalar(inv_tau);
    let (inc, sim) = inc_loss_graph(&mut g, v, w, inv_tau)?;
    let mut total = inc;
    let mut report = LossReport {
        step: 0,
        epoch: 0,
        lr: 0.0,
        inc: g.scalar(inc),
        mim: 0.0,
        inm: 0.0,
        total: 0.0,
        tau,
    };

    if use_mim {
        let t = cfg.visual.n_tokens();
        let masked_rows: Vec<usize> = (k * t..2 * k * t).collect();
        let tokens = g.select_rows(vis.tokens, &masked_rows)?;
        let recon = visual_decode_forward(&mut g, &bound, &cfg.visual, tokens, k)?;
        let target: Vec<f64> = raw.iter().flat_map(|v| v.voxels().iter().copied()).collect();
        let target = g.constant(&Tensor::matrix(k, cfg.visual.n_voxels(), target)?);
        let mim = mim_loss_graph(&mut g, target, recon)?;
        report.mim = g.scalar(mim);
        let weighted = g.scale(mim, obj.alpha);
        total = g.add(total, weighted)?;
    }

    if use_inm {
        let pairs = sample_hard_negatives(&g.tensor(sim), tau, indexed_seed(seed, "hard-negatives", 0));
        let hw = bound.var("inm.w")?;
        let hb = bound.var("inm.b")?;
        let inm = inm_loss_graph(&mut g, v, w, &pairs, hw, hb)?;
        report.inm = g.scalar(inm);
        let weighted = g.scale(inm, obj.beta);
        total = g.add(total, weighted)?;
    }

    report.total = g.scalar(total);
    Ok(LossForward { graph: g, bound, loss: total, report })
}
