use super::layers::{encode_tokens, linear};
use super::params::{Bound, ModelParams};
use super::NetworkEncoderCfg;
use crate::error::{Error, Result};
use crate::synth::{fcn_node_features, Fcn};
use crate::tensor::{Graph, Tensor, Var};

/// Stacks node-feature matrices: `[batch * n_rois, n_rois]`.
pub fn node_feature_batch(fcns: &[&Fcn], cfg: &NetworkEncoderCfg) -> Result<Tensor> {
    let n = cfg.n_rois;
    let mut data = Vec::with_capacity(fcns.len() * n * n);
    for f in fcns {
        if f.n_rois() != n {
            return Err(Error::shape("network_encode", format!("FCN has {} ROIs, encoder expects {n}", f.n_rois())));
        }
        data.extend(fcn_node_features(f));
    }
    Tensor::matrix(fcns.len() * n, n, data)
}

/// Node embedding, attention over nodes, mean-pool readout, projection, L2 norm.
pub fn network_forward(g: &mut Graph, p: &Bound, cfg: &NetworkEncoderCfg, features: Var, batch: usize) -> Result<Var> {
    let mut x = linear(g, p, "network.node", features)?;
    if cfg.positional {
        let pos = p.var("network.pos")?;
        x = g.add_broadcast(x, pos)?;
    }
    let (_, emb) = encode_tokens(g, p, "network", x, batch, cfg.n_layers, cfg.n_heads)?;
    Ok(emb)
}

pub fn network_encode_batch(fcns: &[&Fcn], params: &ModelParams, cfg: &NetworkEncoderCfg) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let feats = g.constant(&node_feature_batch(fcns, cfg)?);
    let emb = network_forward(&mut g, &bound, cfg, feats, fcns.len())?;
    Ok(g.tensor(emb))
}

/// Unit-norm embedding of one FCN.
pub fn network_encode(fcn: &Fcn, params: &ModelParams, cfg: &NetworkEncoderCfg) -> Result<Vec<f64>> {
    Ok(network_encode_batch(&[fcn], params, cfg)?.into_data())
}
