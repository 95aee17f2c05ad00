//! Dataset splits, linear probing, and classification metrics.

mod metrics;
mod probe;
mod split;

pub use metrics::{auc, confusion_matrix, mcc, metrics_compute, MetricsReport};
pub use probe::{linear_probe_fit, LinearProbe, ProbeCfg};
pub use split::{split_dataset, Split, SplitSpec};
