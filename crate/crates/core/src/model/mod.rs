//! Dual encoders, volume decoder, and the matching head.

mod layers;
mod network;
mod params;
mod visual;

pub use network::{network_encode, network_encode_batch, network_forward, node_feature_batch};
pub use params::{init_params, Bound, ModelParams, TAU_INIT, TAU_MAX, TAU_MIN};
pub use visual::{
    decoder_stages, patchify, visual_decode, visual_decode_forward, visual_encode, visual_encode_batch,
    visual_forward, VisualOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Patch-token transformer over volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualEncoderCfg {
    pub input_dims: [usize; 3],
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub positional: bool,
}

impl Default for VisualEncoderCfg {
    fn default() -> Self {
        Self { input_dims: [16; 3], patch_size: 4, embed_dim: 64, n_layers: 2, n_heads: 4, mlp_ratio: 2, positional: true }
    }
}

impl VisualEncoderCfg {
    pub fn full_scale() -> Self {
        Self { input_dims: [96; 3], patch_size: 16, embed_dim: 768, n_layers: 8, n_heads: 12, mlp_ratio: 4, positional: true }
    }

    pub fn grid(&self) -> [usize; 3] {
        self.input_dims.map(|e| e / self.patch_size)
    }

    pub fn n_tokens(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_volume(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn n_voxels(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_dims.iter().any(|&e| e == 0 || e % self.patch_size != 0) {
            return Err(Error::BadConfig(format!(
                "patch size {} must divide every input extent {:?}",
                self.patch_size, self.input_dims
            )));
        }
        check_transformer("visual", self.embed_dim, self.n_layers, self.n_heads, self.mlp_ratio)
    }
}

/// Node-attention transformer over FCN rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkEncoderCfg {
    pub n_rois: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub positional: bool,
}

impl Default for NetworkEncoderCfg {
    fn default() -> Self {
        Self { n_rois: 16, embed_dim: 64, n_layers: 2, n_heads: 4, mlp_ratio: 2, positional: true }
    }
}

impl NetworkEncoderCfg {
    pub fn full_scale() -> Self {
        Self { n_rois: 116, embed_dim: 768, n_layers: 2, n_heads: 4, mlp_ratio: 4, positional: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rois == 0 {
            return Err(Error::BadConfig("network encoder needs at least one ROI".into()));
        }
        check_transformer("network", self.embed_dim, self.n_layers, self.n_heads, self.mlp_ratio)
    }
}

fn check_transformer(which: &str, d: usize, layers: usize, heads: usize, mlp_ratio: usize) -> Result<()> {
    if d == 0 || heads == 0 || d % heads != 0 {
        return Err(Error::BadConfig(format!("{which}: n_heads {heads} must divide embed_dim {d}")));
    }
    if layers == 0 || mlp_ratio == 0 {
        return Err(Error::BadConfig(format!("{which}: n_layers and mlp_ratio must be positive")));
    }
    Ok(())
}

/// Both encoder configurations; the embedding widths must agree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub visual: VisualEncoderCfg,
    pub network: NetworkEncoderCfg,
    /// Initial contrastive temperature; similarities are divided by it.
    pub tau_init: f64,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self { visual: VisualEncoderCfg::default(), network: NetworkEncoderCfg::default(), tau_init: TAU_INIT }
    }
}

impl ModelCfg {
    pub fn full_scale() -> Self {
        Self { visual: VisualEncoderCfg::full_scale(), network: NetworkEncoderCfg::full_scale(), ..Self::default() }
    }

    pub fn embed_dim(&self) -> usize {
        self.visual.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.network.validate()?;
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::invalid("tau_init", format!("must lie in [{TAU_MIN}, {TAU_MAX}], got {}", self.tau_init)));
        }
        if self.visual.embed_dim != self.network.embed_dim {
            return Err(Error::BadConfig(format!(
                "embedding widths differ: visual {} vs network {}",
                self.visual.embed_dim, self.network.embed_dim
            )));
        }
        Ok(())
    }
}
