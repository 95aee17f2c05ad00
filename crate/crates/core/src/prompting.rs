//! Network prompting: classify a volume by its average similarity to
//! group-level reference FCN embeddings of each class.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{metrics_compute, MetricsReport};
use crate::model::{network_encode_batch, visual_encode_batch, ModelCfg, ModelParams};
use crate::rng::{indexed_seed, rng_from};
use crate::synth::{Fcn, Volume3D};

/// An embedding tagged with the subject it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub subject_id: String,
    pub vector: Vec<f64>,
}

/// `k` classes times `r` group-level reference embeddings.
///
/// Each reference is the plain mean of a disjoint, equal-size subset of one
/// class's network embeddings; means are not re-normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub k: usize,
    pub r: usize,
    pub dims: usize,
    /// `refs[class][i]` is a `dims`-vector.
    pub refs: Vec<Vec<Vec<f64>>>,
    /// Subject IDs averaged into each reference.
    pub provenance: Vec<Vec<Vec<String>>>,
}

impl ReferenceSet {
    pub fn validate(&self) -> Result<()> {
        if self.refs.len() != self.k || self.provenance.len() != self.k {
            return Err(Error::Format(format!("reference set declares k = {} but holds {}", self.k, self.refs.len())));
        }
        for (c, class) in self.refs.iter().enumerate() {
            if class.len() != self.r || class.iter().any(|v| v.len() != self.dims) {
                return Err(Error::Format(format!("class {c} references do not match r = {}, dims = {}", self.r, self.dims)));
            }
        }
        Ok(())
    }

    /// Returns a copy with classes reordered: new class `c` is old class `perm[c]`.
    pub fn permute_classes(&self, perm: &[usize]) -> Self {
        Self {
            refs: perm.iter().map(|&c| self.refs[c].clone()).collect(),
            provenance: perm.iter().map(|&c| self.provenance[c].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Partitions each class's embeddings into `r` disjoint equal subsets and averages them.
///
/// With `seed = Some(s)` each class list is shuffled (class `c` uses a stream
/// derived from `(s, c)`); with `None` the input order is kept. After the
/// shuffle the trailing `n mod r` items are dropped and the rest is split into
/// `r` contiguous chunks.
pub fn build_reference_set(by_class: &[Vec<LabeledEmbedding>], r: usize, seed: Option<u64>) -> Result<ReferenceSet> {
    if r == 0 {
        return Err(Error::TooFewReferences { class: 0, available: 0, r });
    }
    let dims = by_class
        .iter()
        .flat_map(|c| c.first())
        .map(|e| e.vector.len())
        .next()
        .ok_or_else(|| Error::TooFewReferences { class: 0, available: 0, r })?;
    let mut refs = Vec::with_capacity(by_class.len());
    let mut provenance = Vec::with_capacity(by_class.len());
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < r {
            return Err(Error::TooFewReferences { class, available: members.len(), r });
        }
        if let Some(bad) = members.iter().find(|e| e.vector.len() != dims) {
            return Err(Error::shape("build_reference_set", format!("{} has dim {} vs {dims}", bad.subject_id, bad.vector.len())));
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        if let Some(s) = seed {
            order.shuffle(&mut rng_from(indexed_seed(s, "reference-shuffle", class as u64)));
        }
        let size = members.len() / r;
        let mut class_refs = Vec::with_capacity(r);
        let mut class_prov = Vec::with_capacity(r);
        for chunk in order[..size * r].chunks_exact(size) {
            let mut mean = vec![0.0; dims];
            for &i in chunk {
                for (m, x) in mean.iter_mut().zip(&members[i].vector) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= size as f64);
            class_refs.push(mean);
            class_prov.push(chunk.iter().map(|&i| members[i].subject_id.clone()).collect());
        }
        refs.push(class_refs);
        provenance.push(class_prov);
    }
    Ok(ReferenceSet { k: by_class.len(), r, dims, refs, provenance })
}

/// Per-reference similarities, per-class means, and the predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptResult {
    pub class_means: Vec<f64>,
    pub predicted: usize,
    pub table: Vec<Vec<f64>>,
}

impl PromptResult {
    /// `class_means[1] - class_means[0]`, the binary ranking score.
    pub fn margin(&self) -> f64 {
        self.class_means.get(1).copied().unwrap_or(0.0) - self.class_means[0]
    }
}

impl fmt::Display for PromptResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "class  mean_sim   references")?;
        for (c, (mean, row)) in self.class_means.iter().zip(&self.table).enumerate() {
            let marker = if c == self.predicted { "*" } else { " " };
            let cells: Vec<String> = row.iter().map(|s| format!("{s:+.4}")).collect();
            writeln!(f, "{marker}{c:<5} {mean:+.6}  {}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Scores `v` against every reference; ties go to the lowest class index.
pub fn prompt_classify(v: &[f64], refs: &ReferenceSet) -> Result<PromptResult> {
    if v.len() != refs.dims {
        return Err(Error::shape("prompt_classify", format!("query dim {} vs reference dim {}", v.len(), refs.dims)));
    }
    let table: Vec<Vec<f64>> = refs
        .refs
        .iter()
        .map(|class| class.iter().map(|w| v.iter().zip(w).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let class_means: Vec<f64> = table.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    let mut predicted = 0;
    for (c, &m) in class_means.iter().enumerate() {
        if m > class_means[predicted] {
            predicted = c;
        }
    }
    Ok(PromptResult { class_means, predicted, table })
}

/// Output of [`prompt_evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEvaluation {
    pub metrics: MetricsReport,
    pub results: Vec<PromptResult>,
    pub references: ReferenceSet,
}

/// Embeds the FCN bank, builds references, and classifies each test volume.
///
/// `bank[c]` holds `(subject_id, fcn)` pairs of class `c`. Metrics include AUC
/// from the `s1 - s0` margin when `k = 2`.
pub fn prompt_evaluate(
    params: &ModelParams,
    cfg: &ModelCfg,
    test: &[(&Volume3D, usize)],
    bank: &[Vec<(String, &Fcn)>],
    r: usize,
    seed: u64,
) -> Result<PromptEvaluation> {
    let mut by_class = Vec::with_capacity(bank.len());
    for (class, members) in bank.iter().enumerate() {
        if members.len() < r {
            return Err(Error::TooFewReferences { class, available: members.len(), r });
        }
        let fcns: Vec<&Fcn> = members.iter().map(|(_, f)| *f).collect();
        let emb = network_encode_batch(&fcns, params, &cfg.network)?;
        by_class.push(
            members
                .iter()
                .enumerate()
                .map(|(i, (id, _))| LabeledEmbedding { subject_id: id.clone(), vector: emb.row(i).to_vec() })
                .collect::<Vec<_>>(),
        );
    }
    let refs = build_reference_set(&by_class, r, Some(seed))?;
    let vols: Vec<&Volume3D> = test.iter().map(|(v, _)| *v).collect();
    let emb = visual_encode_batch(&vols, params, &cfg.visual)?;
    let results: Vec<PromptResult> =
        (0..vols.len()).map(|i| prompt_classify(emb.row(i), &refs)).collect::<Result<_>>()?;
    let preds: Vec<usize> = results.iter().map(|p| p.predicted).collect();
    let labels: Vec<usize> = test.iter().map(|(_, l)| *l).collect();
    let margins: Vec<f64> = results.iter().map(PromptResult::margin).collect();
    let scores = (refs.k == 2).then_some(margins.as_slice());
    let metrics = metrics_compute(&preds, &labels, scores, refs.k)?;
    Ok(PromptEvaluation { metrics, results, references: refs })
}
