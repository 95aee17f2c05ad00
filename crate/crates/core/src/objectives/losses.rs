use super::HardNegativePairs;
use crate::error::{Error, Result};
use crate::synth::Volume3D;
use crate::tensor::{Graph, Tensor, Var};

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `S[i][j] = v_i . w_j`.
pub fn similarity_matrix(images: &Tensor, networks: &Tensor) -> Result<Tensor> {
    check_pair("similarity_matrix", images, networks)?;
    let mut g = Graph::new();
    let v = g.constant(images);
    let w = g.constant(networks);
    let wt = g.transpose(w)?;
    let s = g.matmul(v, wt)?;
    Ok(g.tensor(s))
}

/// Symmetric InfoNCE over `S / tau`.
///
/// `inv_tau` is a one-element node holding `1 / tau`. Row-softmax scores each
/// image against all networks and column-softmax each network against all
/// images; the positive is the diagonal.
pub fn inc_loss_graph(g: &mut Graph, images: Var, networks: Var, inv_tau: Var) -> Result<(Var, Var)> {
    let k = g.shape(images)[0];
    if k < 2 {
        return Err(Error::shape("inc_loss", format!("contrastive batch needs K >= 2, got {k}")));
    }
    let wt = g.transpose(networks)?;
    let sim = g.matmul(images, wt)?;
    let logits = g.scale_by(sim, inv_tau)?;
    let diag: Vec<usize> = (0..k).map(|i| i * k + i).collect();

    let row_lp = g.log_softmax_rows(logits)?;
    let row_pos = g.gather(row_lp, diag.clone(), vec![k])?;
    let row_mean = g.mean(row_pos);

    let logits_t = g.transpose(logits)?;
    let col_lp = g.log_softmax_rows(logits_t)?;
    let col_pos = g.gather(col_lp, diag, vec![k])?;
    let col_mean = g.mean(col_pos);

    let both = g.add(row_mean, col_mean)?;
    Ok((g.scale(both, -0.5), sim))
}

pub fn inc_loss(images: &Tensor, networks: &Tensor, tau: f64) -> Result<f64> {
    check_pair("inc_loss", images, networks)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::BadTemperature(tau));
    }
    let mut g = Graph::new();
    let v = g.constant(images);
    let w = g.constant(networks);
    let inv = g.constant(&Tensor::scalar(1.0 / tau));
    let (loss, _) = inc_loss_graph(&mut g, v, w, inv)?;
    Ok(g.scalar(loss))
}

/// Mean absolute error between `raw` and `recon` (same shape).
pub fn mim_loss_graph(g: &mut Graph, raw: Var, recon: Var) -> Result<Var> {
    let diff = g.sub(raw, recon)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

pub fn mim_loss(raw: &Volume3D, recon: &Volume3D) -> Result<f64> {
    if raw.dims() != recon.dims() {
        return Err(Error::shape("mim_loss", format!("{:?} vs {:?}", raw.dims(), recon.dims())));
    }
    let mut g = Graph::new();
    let a = g.constant(&Tensor::new(vec![raw.len()], raw.voxels().to_vec())?);
    let b = g.constant(&Tensor::new(vec![recon.len()], recon.voxels().to_vec())?);
    let loss = mim_loss_graph(&mut g, a, b)?;
    Ok(g.scalar(loss))
}

/// Row layout of the matching examples: `(image index, network index, is_match)`.
///
/// The first K rows are positives, then one hard negative per image, then one
/// per network.
pub fn inm_examples(k: usize, pairs: &HardNegativePairs) -> Vec<(usize, usize, bool)> {
    let mut out = Vec::with_capacity(3 * k);
    out.extend((0..k).map(|i| (i, i, true)));
    out.extend(pairs.network_for_image.iter().enumerate().map(|(i, &j)| (i, j, false)));
    out.extend(pairs.image_for_network.iter().enumerate().map(|(j, &i)| (i, j, false)));
    out
}

/// Mean two-way cross-entropy of the matching head over 3K examples.
///
/// Class index 1 means "same subject".
pub fn inm_loss_graph(
    g: &mut Graph,
    images: Var,
    networks: Var,
    pairs: &HardNegativePairs,
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let k = g.shape(images)[0];
    if pairs.len() != k {
        return Err(Error::shape("inm_loss", format!("{} hard-negative pairs for batch of {k}", pairs.len())));
    }
    let d2 = 2 * g.shape(images)[1];
    if g.shape(head_w) != [d2, 2] {
        return Err(Error::shape("inm_loss", format!("head maps {:?}, expected [{d2}, 2]", g.shape(head_w))));
    }
    let examples = inm_examples(k, pairs);
    let img_rows: Vec<usize> = examples.iter().map(|e| e.0).collect();
    let net_rows: Vec<usize> = examples.iter().map(|e| e.1).collect();
    let vi = g.select_rows(images, &img_rows)?;
    let wj = g.select_rows(networks, &net_rows)?;
    let x = g.concat_cols(&[vi, wj])?;
    let logits = g.matmul(x, head_w)?;
    let logits = g.add_broadcast(logits, head_b)?;
    let lp = g.log_softmax_rows(logits)?;
    let target: Vec<usize> = examples.iter().enumerate().map(|(r, e)| 2 * r + usize::from(e.2)).collect();
    let n = target.len();
    let picked = g.gather(lp, target, vec![n])?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

pub fn inm_loss(
    images: &Tensor,
    networks: &Tensor,
    pairs: &HardNegativePairs,
    head_w: &Tensor,
    head_b: &Tensor,
) -> Result<f64> {
    check_pair("inm_loss", images, networks)?;
    let mut g = Graph::new();
    let v = g.constant(images);
    let w = g.constant(networks);
    let hw = g.constant(head_w);
    let hb = g.constant(head_b);
    let loss = inm_loss_graph(&mut g, v, w, pairs, hw, hb)?;
    Ok(g.scalar(loss))
}
