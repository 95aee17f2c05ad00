use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{total_loss, LossReport, ObjectiveCfg};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelCfg, ModelParams};
use crate::rng::{indexed_seed, rng_from};
use crate::synth::PairedSample;
use crate::tensor::{adam_step, cosine_lr, AdamState, LrSchedule};

/// Optimization schedule and objective settings for pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Linear ramp over the first steps; the cosine schedule is scaled by `min(1, (s + 1) / warmup_steps)`.
    pub warmup_steps: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mask_ratio: f64,
    pub augment: crate::synth::AugmentCfg,
}

impl Default for TrainHyper {
    fn default() -> Self {
        let obj = ObjectiveCfg::default();
        Self {
            epochs: 50,
            batch_size: 16,
            lr_initial: 1e-3,
            lr_min: 1e-4,
            weight_decay: 1e-5,
            warmup_steps: 60,
            alpha: obj.alpha,
            beta: obj.beta,
            mask_ratio: obj.mask_ratio,
            augment: obj.augment,
        }
    }
}

impl TrainHyper {
    pub fn full_scale() -> Self {
        Self { epochs: 400, batch_size: 256, lr_initial: 1e-5, lr_min: 1e-6, ..Self::default() }
    }

    pub fn objective(&self) -> ObjectiveCfg {
        ObjectiveCfg { alpha: self.alpha, beta: self.beta, mask_ratio: self.mask_ratio, augment: self.augment }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return Err(Error::invalid("lr_initial", format!("must be positive, got {}", self.lr_initial)));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_initial) {
            return Err(Error::invalid("lr_min", format!("must lie in [0, lr_initial], got {}", self.lr_min)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", format!("must be >= 0, got {}", self.weight_decay)));
        }
        self.objective().validate()
    }

    pub fn schedule(&self, n_samples: usize) -> LrSchedule {
        LrSchedule {
            lr_initial: self.lr_initial,
            lr_min: self.lr_min,
            total_steps: self.epochs * steps_per_epoch(n_samples, self.batch_size),
        }
    }
}

fn warmup_factor(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Full batches per epoch; the incomplete trailing batch is dropped.
pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples / batch_size.max(1)
}

/// Parameters plus optimizer state after some number of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub step: usize,
}

impl TrainedModel {
    pub fn fresh(cfg: &ModelCfg, hyper: &TrainHyper, seed: u64) -> Result<Self> {
        let params = init_params(cfg, seed)?;
        let refs: Vec<_> = params.iter().map(|(_, t)| t).collect();
        let optimizer = AdamState::new(&refs, hyper.weight_decay);
        Ok(Self { params, optimizer, step: 0 })
    }
}

/// Pretrains from a fresh initialization derived from `seed`.
pub fn pretrain(
    cohort: &[PairedSample],
    cfg: &ModelCfg,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(TrainedModel, Vec<LossReport>)> {
    hyper.validate()?;
    let start = TrainedModel::fresh(cfg, hyper, seed)?;
    resume_pretrain(start, cohort, cfg, hyper, seed)
}

/// Continues training from `state` until `hyper.epochs` epochs are complete.
pub fn resume_pretrain(
    state: TrainedModel,
    cohort: &[PairedSample],
    cfg: &ModelCfg,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(TrainedModel, Vec<LossReport>)> {
    pretrain_until(state, cohort, cfg, hyper, seed, hyper.epochs)
}

/// Trains from `state` up to (not including) epoch `until_epoch` of the
/// `hyper.epochs`-long schedule.
///
/// Resuming is supported at epoch boundaries only. Each epoch draws its own
/// shuffle and each step its own augmentation/mask/negative seeds, so a
/// resumed run follows the same trajectory as an uninterrupted one.
pub fn pretrain_until(
    mut state: TrainedModel,
    cohort: &[PairedSample],
    cfg: &ModelCfg,
    hyper: &TrainHyper,
    seed: u64,
    until_epoch: usize,
) -> Result<(TrainedModel, Vec<LossReport>)> {
    hyper.validate()?;
    if until_epoch > hyper.epochs {
        return Err(Error::BadHyper(format!("cannot stop at epoch {until_epoch} of {}", hyper.epochs)));
    }
    cfg.validate()?;
    if cohort.len() < hyper.batch_size {
        return Err(Error::BadHyper(format!(
            "cohort of {} is smaller than batch_size {}",
            cohort.len(),
            hyper.batch_size
        )));
    }
    let per_epoch = steps_per_epoch(cohort.len(), hyper.batch_size);
    let schedule = hyper.schedule(cohort.len());
    if state.step % per_epoch != 0 || state.step > schedule.total_steps {
        return Err(Error::BadHyper(format!(
            "cannot resume at step {} (epoch length {per_epoch}, total {})",
            state.step, schedule.total_steps
        )));
    }
    let obj = hyper.objective();
    let names: Vec<String> = state.params.names().map(str::to_owned).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut history = Vec::with_capacity(schedule.total_steps - state.step);

    for epoch in state.step / per_epoch..until_epoch {
        let mut order: Vec<usize> = (0..cohort.len()).collect();
        order.shuffle(&mut rng_from(indexed_seed(seed, "shuffle", epoch as u64)));
        for chunk in order.chunks_exact(hyper.batch_size) {
            let step = state.step;
            let lr = cosine_lr(step, &schedule)? * warmup_factor(step, hyper.warmup_steps);
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &cohort[i]).collect();
            let mut fwd = total_loss(&batch, &state.params, cfg, &obj, indexed_seed(seed, "step", step as u64))?;
            fwd.graph.backward(fwd.loss)?;
            state.params.collect_grads(&fwd.graph, &fwd.bound);
            {
                let mut refs: Vec<&mut crate::tensor::Tensor> = state.params.iter_mut().map(|(_, t)| t).collect();
                adam_step(&mut refs, &name_refs, &mut state.optimizer, lr)?;
            }
            state.params.clamp_temperature();
            for (_, t) in state.params.iter_mut() {
                t.clear_grad();
            }
            state.step += 1;
            let mut report = fwd.report;
            report.step = step;
            report.epoch = epoch;
            report.lr = lr;
            log::debug!(
                "step {step} epoch {epoch} lr {lr:.3e} inc {:.4} mim {:.4} inm {:.4} total {:.4} tau {:.4}",
                report.inc,
                report.mim,
                report.inm,
                report.total,
                report.tau
            );
            history.push(report);
        }
        if let Some(last) = history.last() {
            log::info!("epoch {epoch}: total {:.4} (inc {:.4})", last.total, last.inc);
        }
    }
    Ok((state, history))
}
