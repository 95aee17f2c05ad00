use super::params::Bound;
use crate::error::Result;
use crate::tensor::{Graph, Var};

const LN_EPS: f64 = 1e-5;

pub(super) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

pub(super) fn layer_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = p.var(&format!("{prefix}.g"))?;
    let bias = p.var(&format!("{prefix}.b"))?;
    let y = g.layer_norm_rows(x, LN_EPS)?;
    let y = g.mul_broadcast(y, gain)?;
    g.add_broadcast(y, bias)
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub(super) fn block(g: &mut Graph, p: &Bound, prefix: &str, x: Var, groups: usize, heads: usize) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let qkv = linear(g, p, &format!("{prefix}.qkv"), h)?;
    let a = g.attention(qkv, groups, heads)?;
    let a = linear(g, p, &format!("{prefix}.proj"), a)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{prefix}.mlp2"), h)?;
    g.add(x, h)
}

/// Blocks, final norm, mean-pool per group, projection, L2 normalization.
///
/// Returns `(tokens after the final norm, unit-norm pooled embedding)`.
pub(super) fn encode_tokens(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    mut x: Var,
    groups: usize,
    layers: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    for l in 0..layers {
        x = block(g, p, &format!("{prefix}.block{l}"), x, groups, heads)?;
    }
    let tokens = layer_norm(g, p, &format!("{prefix}.ln_f"), x)?;
    let pooled = g.mean_groups(tokens, groups)?;
    let proj = linear(g, p, &format!("{prefix}.head"), pooled)?;
    let emb = g.l2_normalize_rows(proj)?;
    Ok((tokens, emb))
}
