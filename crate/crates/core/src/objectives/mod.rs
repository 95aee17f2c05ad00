//! Pretraining objectives and the training loop.

mod hardneg;
mod losses;
mod total;
mod train;

pub use hardneg::{sample_hard_negatives, HardNegativePairs};
pub use losses::{
    inc_loss, inc_loss_graph, inm_loss, inm_loss_graph, mim_loss, mim_loss_graph, similarity_matrix,
};
pub use total::{total_loss, LossForward, ObjectiveCfg};
pub use train::{pretrain, pretrain_until, resume_pretrain, steps_per_epoch, TrainHyper, TrainedModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index-aligned image and network embeddings of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub images: Tensor,
    pub networks: Tensor,
    pub subject_ids: Vec<String>,
}

impl BatchEmbeddings {
    pub fn new(images: Tensor, networks: Tensor, subject_ids: Vec<String>) -> Result<Self> {
        if images.shape() != networks.shape() || images.shape().len() != 2 {
            return Err(Error::shape("batch embeddings", format!("{:?} vs {:?}", images.shape(), networks.shape())));
        }
        if subject_ids.len() != images.rows() {
            return Err(Error::LengthMismatch(subject_ids.len(), images.rows()));
        }
        Ok(Self { images, networks, subject_ids })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-step loss breakdown; `total = inc + alpha * mim + beta * inm`.
///
/// Terms whose weight is zero are not evaluated and are reported as 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub inc: f64,
    pub mim: f64,
    pub inm: f64,
    pub total: f64,
    pub tau: f64,
}
