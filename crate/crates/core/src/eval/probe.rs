use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_row;

/// Multinomial logistic regression settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeCfg {
    pub l2: f64,
    pub max_iters: usize,
    pub lr: f64,
    pub tol: f64,
}

impl Default for ProbeCfg {
    fn default() -> Self {
        Self { l2: 1e-3, max_iters: 5000, lr: 0.5, tol: 1e-6 }
    }
}

impl ProbeCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::invalid("probe.l2", "must be finite and >= 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("probe.lr", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("probe.max_iters", "must be >= 1"));
        }
        Ok(())
    }
}

/// A fitted linear classifier over fixed features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub n_features: usize,
    pub n_classes: usize,
    /// Row-major `[n_classes, n_features]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub iterations: usize,
}

impl LinearProbe {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let w = &self.weights[c * self.n_features..(c + 1) * self.n_features];
                self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Class probabilities for one sample.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::shape("probe", format!("expected {} features, got {}", self.n_features, x.len())));
        }
        let l = self.logits(x);
        let mut p = vec![0.0; l.len()];
        softmax_row(&l, &mut p);
        Ok(p)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.probabilities(x)?;
        Ok(argmax(&p))
    }

    /// Mean cross-entropy plus `l2 / 2 * |W|^2`, with its gradients for the
    /// weights and the bias. Labels must be `< n_classes`.
    pub fn objective(&self, xs: &[Vec<f64>], labels: &[usize], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let (k, d) = (self.n_classes, self.n_features);
        let n = xs.len() as f64;
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        let mut loss = 0.0;
        let mut p = vec![0.0; k];
        for (x, &y) in xs.iter().zip(labels) {
            softmax_row(&self.logits(x), &mut p);
            loss -= p[y].ln() / n;
            p[y] -= 1.0;
            for c in 0..k {
                gb[c] += p[c] / n;
                for j in 0..d {
                    gw[c * d + j] += p[c] * x[j] / n;
                }
            }
        }
        for (g, w) in gw.iter_mut().zip(&self.weights) {
            *g += l2 * w;
        }
        loss += 0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
        (loss, gw, gb)
    }

    /// Predicted classes and, for binary problems, the class-1 probability.
    pub fn predict_all(&self, xs: &[Vec<f64>]) -> Result<(Vec<usize>, Option<Vec<f64>>)> {
        let probs: Vec<Vec<f64>> = xs.iter().map(|x| self.probabilities(x)).collect::<Result<_>>()?;
        let preds = probs.iter().map(|p| argmax(p)).collect();
        let scores = (self.n_classes == 2).then(|| probs.iter().map(|p| p[1]).collect());
        Ok((preds, scores))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fits an L2-regularized softmax classifier by full-batch gradient descent.
///
/// Stops when the gradient norm drops below `cfg.tol` or after `max_iters`.
pub fn linear_probe_fit(xs: &[Vec<f64>], labels: &[usize], cfg: &ProbeCfg) -> Result<LinearProbe> {
    cfg.validate()?;
    if xs.len() != labels.len() {
        return Err(Error::LengthMismatch(xs.len(), labels.len()));
    }
    if xs.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let d = xs[0].len();
    if let Some(bad) = xs.iter().find(|x| x.len() != d) {
        return Err(Error::shape("probe", format!("ragged features: {} vs {d}", bad.len())));
    }
    let k = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut present = vec![false; k];
    for &l in labels {
        present[l] = true;
    }
    let distinct = present.iter().filter(|&&p| p).count();
    if distinct < 2 {
        return Err(Error::DegenerateLabels(distinct));
    }

    let mut probe = LinearProbe {
        n_features: d,
        n_classes: k,
        weights: vec![0.0; k * d],
        bias: vec![0.0; k],
        iterations: 0,
    };
    for it in 0..cfg.max_iters {
        let (_, gw, gb) = probe.objective(xs, labels, cfg.l2);
        let norm = gw.iter().chain(&gb).map(|g| g * g).sum::<f64>().sqrt();
        probe.iterations = it;
        if norm < cfg.tol {
            break;
        }
        for (w, g) in probe.weights.iter_mut().zip(&gw) {
            *w -= cfg.lr * g;
        }
        for (b, g) in probe.bias.iter_mut().zip(&gb) {
            *b -= cfg.lr * g;
        }
    }
    Ok(probe)
}
