//! Central finite-difference validation of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the analytic gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the tracked input and must return a
/// one-element node. Returns `max_i |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::BadHyper(format!("finite-difference step must be in (0, 1e-3], got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x);
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let mut g = Graph::new();
        let v = g.constant(&t);
        let out = f(&mut g, v)?;
        if g.value(out).len() != 1 {
            return Err(Error::NonScalarLoss { shape: g.shape(out).to_vec() });
        }
        Ok(g.scalar(out))
    };

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let ad = analytic[i];
        let err = (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
