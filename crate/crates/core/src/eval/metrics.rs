use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accuracy, optional binary AUC, multiclass MCC, and the confusion matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub auc: Option<f64>,
    pub mcc: f64,
    pub n: usize,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut m = vec![vec![0; n_classes]; n_classes];
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::shape("confusion_matrix", format!("class index {} >= {n_classes}", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Gorodkin's multiclass MCC; 0 when the denominator vanishes.
pub fn mcc(confusion: &[Vec<usize>]) -> f64 {
    let k = confusion.len();
    let s: f64 = confusion.iter().flatten().sum::<usize>() as f64;
    let c: f64 = (0..k).map(|i| confusion[i][i]).sum::<usize>() as f64;
    let t: Vec<f64> = confusion.iter().map(|row| row.iter().sum::<usize>() as f64).collect();
    let p: Vec<f64> = (0..k).map(|j| confusion.iter().map(|row| row[j]).sum::<usize>() as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let tt: f64 = t.iter().map(|x| x * x).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        ((c * s - pt) / denom).clamp(-1.0, 1.0)
    }
}

/// Mann-Whitney AUC with mid-ranks (ties credited one half). Label 1 is positive.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let distinct = labels.iter().copied().max().map_or(0, |m| m + 1);
    if distinct > 2 {
        return Err(Error::AucOnMulticlass(distinct));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&l, _)| l == 1).map(|(_, r)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Computes ACC and MCC from predictions, and AUC when binary `scores` are given.
///
/// AUC is `None` when no scores are supplied or only one class is present.
pub fn metrics_compute(
    preds: &[usize],
    labels: &[usize],
    scores: Option<&[f64]>,
    n_classes: usize,
) -> Result<MetricsReport> {
    let confusion = confusion_matrix(preds, labels, n_classes)?;
    let n = labels.len();
    let correct: usize = (0..n_classes).map(|i| confusion[i][i]).sum();
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let auc = match scores {
        None => None,
        Some(s) => {
            if n_classes > 2 {
                return Err(Error::AucOnMulticlass(n_classes));
            }
            match auc(s, labels) {
                Ok(v) => Some(v),
                Err(Error::TooFewSamples { .. }) => None,
                Err(e) => return Err(e),
            }
        }
    };
    Ok(MetricsReport { acc, auc, mcc: mcc(&confusion), n, confusion })
}
