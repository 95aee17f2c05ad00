//! Adam with decoupled weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Moment estimates for every registered parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl AdamState {
    /// Zeroed moments shaped like `params`, standard betas and epsilon.
    pub fn new(params: &[&Tensor], weight_decay: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
        }
    }
}

/// One Adam update over `params`, reading each tensor's `grad`.
///
/// Weight decay is decoupled: `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
/// `names` is only used for error messages and may be shorter than `params`.
pub fn adam_step(params: &mut [&mut Tensor], names: &[&str], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::BadHyper(format!("learning rate must be non-negative, got {lr}")));
    }
    if params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params vs {} moment slots", params.len(), state.first_moment.len()),
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            let name = names.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("#{i}"));
            return Err(Error::MissingGradient { name });
        }
        if state.first_moment[i].len() != p.numel() {
            return Err(Error::shape("adam_step", format!("moment slot {i} has wrong length")));
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * state.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *x = *x * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_initial` at step 0 to `lr_min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_initial: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

pub fn cosine_lr(step: usize, schedule: &LrSchedule) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::StepOutOfRange { step, total: schedule.total_steps });
    }
    if schedule.total_steps == 0 {
        return Ok(schedule.lr_initial);
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.lr_min
        + 0.5 * (schedule.lr_initial - schedule.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}
