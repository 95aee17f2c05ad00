use super::layers::{encode_tokens, linear};
use super::params::{Bound, ModelParams};
use super::VisualEncoderCfg;
use crate::error::{Error, Result};
use crate::synth::Volume3D;
use crate::tensor::{Graph, Tensor, Var};

/// Flattens non-overlapping cubic patches of each volume into rows.
///
/// Output is `[batch * tokens, patch^3]`; tokens are ordered row-major over
/// the patch grid and patch entries row-major within the patch.
pub fn patchify(volumes: &[&Volume3D], cfg: &VisualEncoderCfg) -> Result<Tensor> {
    let p = cfg.patch_size;
    let [gd, gh, gw] = cfg.grid();
    let mut data = Vec::with_capacity(volumes.len() * cfg.n_voxels());
    for v in volumes {
        if v.dims() != cfg.input_dims {
            return Err(Error::shape(
                "patchify",
                format!("volume {:?} vs encoder input {:?}", v.dims(), cfg.input_dims),
            ));
        }
        for tz in 0..gd {
            for ty in 0..gh {
                for tx in 0..gw {
                    for kz in 0..p {
                        for ky in 0..p {
                            for kx in 0..p {
                                data.push(v.at(tz * p + kz, ty * p + ky, tx * p + kx));
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::matrix(volumes.len() * cfg.n_tokens(), cfg.patch_volume(), data)
}

/// Outputs of one visual encoder pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct VisualOutput {
    /// `[batch * tokens, d]` token grid after the final norm.
    pub tokens: Var,
    /// `[batch, d]` unit-norm embeddings.
    pub embedding: Var,
}

pub fn visual_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &VisualEncoderCfg,
    patches: Var,
    batch: usize,
) -> Result<VisualOutput> {
    let mut x = linear(g, p, "visual.patch", patches)?;
    if cfg.positional {
        let pos = p.var("visual.pos")?;
        x = g.add_broadcast(x, pos)?;
    }
    let (tokens, embedding) = encode_tokens(g, p, "visual", x, batch, cfg.n_layers, cfg.n_heads)?;
    Ok(VisualOutput { tokens, embedding })
}

/// One transposed-convolution stage with kernel size equal to stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderStage {
    pub factor: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Upsampling stages that take the token grid back to voxel resolution.
///
/// The patch size is factored into stride-2 stages plus one stage for any odd
/// remainder; channels halve per stage (floor 8) and the last stage emits 1.
pub fn decoder_stages(cfg: &VisualEncoderCfg) -> Vec<DecoderStage> {
    let mut factors = Vec::new();
    let mut rem = cfg.patch_size.max(1);
    while rem % 2 == 0 {
        factors.push(2);
        rem /= 2;
    }
    if rem > 1 || factors.is_empty() {
        factors.push(rem);
    }
    let mut stages = Vec::with_capacity(factors.len());
    let mut channels = cfg.embed_dim;
    for (i, &factor) in factors.iter().enumerate() {
        let out = if i + 1 == factors.len() { 1 } else { (channels / 2).max(8) };
        stages.push(DecoderStage { factor, in_channels: channels, out_channels: out });
        channels = out;
    }
    stages
}

/// Pixel-shuffle gather index for one stage.
fn shuffle_index(batch: usize, grid: [usize; 3], f: usize, c: usize) -> Vec<usize> {
    let [gz, gy, gx] = grid;
    let in_cols = f * f * f * c;
    let (oz_n, oy_n, ox_n) = (gz * f, gy * f, gx * f);
    let in_rows = gz * gy * gx;
    let mut index = Vec::with_capacity(batch * oz_n * oy_n * ox_n * c);
    for b in 0..batch {
        for oz in 0..oz_n {
            for oy in 0..oy_n {
                for ox in 0..ox_n {
                    let row = b * in_rows + ((oz / f) * gy + oy / f) * gx + ox / f;
                    let k = ((oz % f) * f + oy % f) * f + ox % f;
                    for ch in 0..c {
                        index.push(row * in_cols + k * c + ch);
                    }
                }
            }
        }
    }
    index
}

/// Decodes a `[batch * tokens, d]` token grid to `[batch, voxels]`.
pub fn visual_decode_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &VisualEncoderCfg,
    tokens: Var,
    batch: usize,
) -> Result<Var> {
    let expected = [batch * cfg.n_tokens(), cfg.embed_dim];
    if g.shape(tokens) != expected {
        return Err(Error::shape("visual_decode", format!("tokens {:?} vs {expected:?}", g.shape(tokens))));
    }
    let stages = decoder_stages(cfg);
    let mut grid = cfg.grid();
    let mut x = tokens;
    for (s, stage) in stages.iter().enumerate() {
        let w = p.var(&format!("decoder.stage{s}.w"))?;
        let b = p.var(&format!("decoder.stage{s}.b"))?;
        let y = g.matmul(x, w)?;
        let rows = batch * grid.iter().product::<usize>() * stage.factor.pow(3);
        let index = shuffle_index(batch, grid, stage.factor, stage.out_channels);
        let y = g.gather(y, index, vec![rows, stage.out_channels])?;
        x = g.add_broadcast(y, b)?;
        if s + 1 < stages.len() {
            x = g.gelu(x);
        }
        grid = grid.map(|e| e * stage.factor);
    }
    g.reshape(x, vec![batch, cfg.n_voxels()])
}

/// Unit-norm embeddings `[n, d]` for a batch of volumes.
pub fn visual_encode_batch(volumes: &[&Volume3D], params: &ModelParams, cfg: &VisualEncoderCfg) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let patches = g.constant(&patchify(volumes, cfg)?);
    let out = visual_forward(&mut g, &bound, cfg, patches, volumes.len())?;
    Ok(g.tensor(out.embedding))
}

/// Unit-norm embedding of one volume.
pub fn visual_encode(v: &Volume3D, params: &ModelParams, cfg: &VisualEncoderCfg) -> Result<Vec<f64>> {
    Ok(visual_encode_batch(&[v], params, cfg)?.into_data())
}

/// Reconstructs a volume from a `[tokens, d]` latent grid.
pub fn visual_decode(latents: &Tensor, params: &ModelParams, cfg: &VisualEncoderCfg) -> Result<Volume3D> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(latents);
    let out = visual_decode_forward(&mut g, &bound, cfg, x, 1)?;
    Volume3D::new(cfg.input_dims, g.value(out).to_vec(), "recon")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_cover_patch_size() {
        for p in [1, 2, 3, 4, 6, 8] {
            let cfg = VisualEncoderCfg { patch_size: p, input_dims: [p * 2; 3], ..Default::default() };
            let stages = decoder_stages(&cfg);
            assert_eq!(stages.iter().map(|s| s.factor).product::<usize>(), p);
            assert_eq!(stages.last().unwrap().out_channels, 1);
            assert_eq!(stages[0].in_channels, cfg.embed_dim);
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let idx = shuffle_index(2, [2, 1, 3], 2, 3);
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, (0..idx.len()).collect::<Vec<_>>());
    }

    #[test]
    fn patchify_roundtrips_voxels() {
        let cfg = VisualEncoderCfg { input_dims: [4, 4, 4], patch_size: 2, ..Default::default() };
        let v = Volume3D::new([4, 4, 4], (0..64).map(f64::from).collect(), "p").unwrap();
        let t = patchify(&[&v], &cfg).unwrap();
        assert_eq!(t.shape(), &[8, 8]);
        let mut all = t.data().to_vec();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, v.voxels());
        // first patch is the 2x2x2 corner
        assert_eq!(t.row(0), &[0.0, 1.0, 4.0, 5.0, 16.0, 17.0, 20.0, 21.0]);
    }
}
