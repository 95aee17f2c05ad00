//! End-to-end protocol: split, pretrain, then retrieval, prompting and probing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{linear_probe_fit, metrics_compute, split_dataset, MetricsReport, ProbeCfg, Split, SplitSpec};
use crate::model::{init_params, network_encode_batch, visual_encode_batch, ModelCfg, ModelParams};
use crate::objectives::{pretrain, LossReport, TrainHyper};
use crate::prompting::prompt_evaluate;
use crate::rng::{indexed_seed, rng_from};
use crate::synth::{Fcn, PairedSample, Volume3D};
use crate::tensor::Tensor;

/// Downstream evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub split: SplitSpec,
    pub probe: ProbeCfg,
    pub prompt_r: Vec<usize>,
    pub fcn_fraction: f64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { split: SplitSpec::default(), probe: ProbeCfg::default(), prompt_r: vec![1, 5, 10], fcn_fraction: 0.10 }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        self.split.validate().map_err(|e| prefix("split", e))?;
        self.probe.validate()?;
        if !(self.fcn_fraction > 0.0 && self.fcn_fraction <= 1.0) {
            return Err(Error::invalid("fcn_fraction", format!("must lie in (0, 1], got {}", self.fcn_fraction)));
        }
        if self.prompt_r.is_empty() || self.prompt_r.contains(&0) {
            return Err(Error::invalid("prompt_r", "needs at least one positive r"));
        }
        Ok(())
    }
}

fn prefix(scope: &str, e: Error) -> Error {
    match e {
        Error::Validation { path, message } => Error::Validation { path: format!("{scope}.{path}"), message },
        other => other,
    }
}

/// Number of rows `i` whose best-matching column is `i`.
pub fn retrieval_top1(images: &Tensor, networks: &Tensor) -> Result<usize> {
    if images.shape() != networks.shape() {
        return Err(Error::shape("retrieval", format!("{:?} vs {:?}", images.shape(), networks.shape())));
    }
    let n = images.rows();
    let mut hits = 0;
    for i in 0..n {
        let v = images.row(i);
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for j in 0..n {
            let s: f64 = v.iter().zip(networks.row(j)).map(|(a, b)| a * b).sum();
            if s > best_sim {
                best_sim = s;
                best = j;
            }
        }
        hits += usize::from(best == i);
    }
    Ok(hits)
}

/// Per-class subsample of training indices: `ceil(fraction * n_c)` of each class.
pub fn fcn_bank(train: &[usize], labels: &[usize], k: usize, fraction: f64, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    (0..k)
        .map(|c| {
            let mut members: Vec<usize> = train.iter().copied().filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng_from(indexed_seed(seed, "fcn-bank", c as u64)));
            let take = ((members.len() as f64 * fraction).ceil() as usize).min(members.len());
            members.truncate(take);
            members.sort_unstable();
            members
        })
        .collect()
}

/// Prompting metrics for one reference count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub r: usize,
    pub metrics: MetricsReport,
}

/// Everything measured on the held-out split for one set of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_test: usize,
    pub retrieval_top1: usize,
    pub prompting: Vec<PromptRow>,
    pub probe: MetricsReport,
}

impl Evaluation {
    pub fn prompt(&self, r: usize) -> Option<&MetricsReport> {
        self.prompting.iter().find(|p| p.r == r).map(|p| &p.metrics)
    }
}

fn probe_metrics(
    params: &ModelParams,
    cfg: &ModelCfg,
    cohort: &[PairedSample],
    split: &Split,
    probe: &ProbeCfg,
    k: usize,
) -> Result<MetricsReport> {
    let embed = |idx: &[usize]| -> Result<Vec<Vec<f64>>> {
        let vols: Vec<&Volume3D> = idx.iter().map(|&i| &cohort[i].volume).collect();
        let t = visual_encode_batch(&vols, params, &cfg.visual)?;
        Ok((0..t.rows()).map(|i| t.row(i).to_vec()).collect())
    };
    let train_y: Vec<usize> = split.train.iter().map(|&i| cohort[i].label).collect();
    let test_y: Vec<usize> = split.test.iter().map(|&i| cohort[i].label).collect();
    let fitted = linear_probe_fit(&embed(&split.train)?, &train_y, probe)?;
    let (preds, scores) = fitted.predict_all(&embed(&split.test)?)?;
    metrics_compute(&preds, &test_y, scores.as_deref(), k)
}

/// Retrieval, prompting for every `r`, and the linear probe on `split.test`.
pub fn evaluate(
    params: &ModelParams,
    cfg: &ModelCfg,
    cohort: &[PairedSample],
    split: &Split,
    spec: &EvalSpec,
    seed: u64,
) -> Result<Evaluation> {
    let labels: Vec<usize> = cohort.iter().map(|s| s.label).collect();
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let test_vols: Vec<&Volume3D> = split.test.iter().map(|&i| &cohort[i].volume).collect();
    let test_fcns: Vec<&Fcn> = split.test.iter().map(|&i| &cohort[i].fcn).collect();
    let images = visual_encode_batch(&test_vols, params, &cfg.visual)?;
    let networks = network_encode_batch(&test_fcns, params, &cfg.network)?;
    let retrieval = retrieval_top1(&images, &networks)?;

    let bank_idx = fcn_bank(&split.train, &labels, k, spec.fcn_fraction, seed);
    let bank: Vec<Vec<(String, &Fcn)>> = bank_idx
        .iter()
        .map(|c| c.iter().map(|&i| (cohort[i].subject_id.clone(), &cohort[i].fcn)).collect())
        .collect();
    let test: Vec<(&Volume3D, usize)> = split.test.iter().map(|&i| (&cohort[i].volume, labels[i])).collect();
    let prompting = spec
        .prompt_r
        .iter()
        .map(|&r| {
            let out = prompt_evaluate(params, cfg, &test, &bank, r, indexed_seed(seed, "prompt", r as u64))?;
            Ok(PromptRow { r, metrics: out.metrics })
        })
        .collect::<Result<_>>()?;
    let probe = probe_metrics(params, cfg, cohort, split, &spec.probe, k)?;
    Ok(Evaluation { n_test: split.test.len(), retrieval_top1: retrieval, prompting, probe })
}

/// A pretrained model evaluated against its own untrained initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub trained: Evaluation,
    pub untrained: Evaluation,
    pub history: Vec<LossReport>,
}

/// Splits the cohort, pretrains on the training part, and evaluates both the
/// trained and the freshly initialized parameters.
pub fn run_experiment(
    cohort: &[PairedSample],
    cfg: &ModelCfg,
    hyper: &TrainHyper,
    spec: &EvalSpec,
    seed: u64,
) -> Result<(ModelParams, ExperimentOutcome)> {
    spec.validate()?;
    let labels: Vec<usize> = cohort.iter().map(|s| s.label).collect();
    let split = split_dataset(&labels, &spec.split)?;
    let train: Vec<PairedSample> = split.train.iter().map(|&i| cohort[i].clone()).collect();
    let (model, history) = pretrain(&train, cfg, hyper, seed)?;
    let trained = evaluate(&model.params, cfg, cohort, &split, spec, seed)?;
    let untrained = evaluate(&init_params(cfg, seed)?, cfg, cohort, &split, spec, seed)?;
    Ok((model.params, ExperimentOutcome { trained, untrained, history }))
}

/// The four loss combinations compared by an ablation: (name, alpha, beta).
pub fn ablation_rows(hyper: &TrainHyper) -> [(&'static str, f64, f64); 4] {
    [
        ("INC", 0.0, 0.0),
        ("INC+MIM", hyper.alpha, 0.0),
        ("INC+INM", 0.0, hyper.beta),
        ("INC+MIM+INM", hyper.alpha, hyper.beta),
    ]
}

/// One trained configuration of an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub evaluation: Evaluation,
    pub final_loss: Option<LossReport>,
}

/// Trains each loss combination from the same initialization and split.
pub fn run_ablation(
    cohort: &[PairedSample],
    cfg: &ModelCfg,
    hyper: &TrainHyper,
    spec: &EvalSpec,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    run_ablation_rows(cohort, cfg, hyper, spec, seed, &ablation_rows(hyper))
}

/// [`run_ablation`] restricted to the given `(name, alpha, beta)` rows.
pub fn run_ablation_rows(
    cohort: &[PairedSample],
    cfg: &ModelCfg,
    hyper: &TrainHyper,
    spec: &EvalSpec,
    seed: u64,
    rows: &[(&str, f64, f64)],
) -> Result<Vec<AblationRow>> {
    spec.validate()?;
    let labels: Vec<usize> = cohort.iter().map(|s| s.label).collect();
    let split = split_dataset(&labels, &spec.split)?;
    let train: Vec<PairedSample> = split.train.iter().map(|&i| cohort[i].clone()).collect();
    rows.iter()
        .map(|&(name, alpha, beta)| {
            log::info!("ablation row {name}");
            let row_hyper = TrainHyper { alpha, beta, ..hyper.clone() };
            let (model, history) = pretrain(&train, cfg, &row_hyper, seed)?;
            let evaluation = evaluate(&model.params, cfg, cohort, &split, spec, seed)?;
            Ok(AblationRow { name: name.to_string(), alpha, beta, evaluation, final_loss: history.last().cloned() })
        })
        .collect()
}
