use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::EvalSpec;
use crate::model::ModelCfg;
use crate::objectives::TrainHyper;
use crate::rng::stream_seed;
use crate::synth::{CohortRecipe, CohortSpec};

/// Everything needed to regenerate data, train, and evaluate.
///
/// Missing keys take the desk-scale defaults; unknown keys are rejected.
/// The command line replaces `cohort.seed` and `eval.split.seed` with
/// streams derived from the top-level `seed` (see [`Config::with_derived_seeds`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub cohort: CohortSpec,
    pub recipe: CohortRecipe,
    pub model: ModelCfg,
    pub hyper: TrainHyper,
    pub eval: EvalSpec,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            cohort: CohortSpec::default(),
            recipe: CohortRecipe::default(),
            model: ModelCfg::default(),
            hyper: TrainHyper::default(),
            eval: EvalSpec::default(),
            seed: 0,
        }
    }
}

/// Rewrites any error from a nested validator as a `Validation` error under `scope`.
pub(crate) fn scoped(scope: &str, e: Error) -> Error {
    match e {
        Error::Validation { path, message } => Error::Validation { path: format!("{scope}.{path}"), message },
        Error::BadRatio(r) => Error::Validation {
            path: format!("{scope}.mask_ratio"),
            message: format!("must lie strictly between 0 and 1, got {r}"),
        },
        other => Error::Validation { path: scope.to_string(), message: other.to_string() },
    }
}

impl Config {
    /// Full-scale settings: 96^3 volumes, 116 ROIs, width 768, batch 256, 400 epochs.
    pub fn full_scale() -> Self {
        let mut cfg = Self { model: ModelCfg::full_scale(), hyper: TrainHyper::full_scale(), ..Self::default() };
        cfg.cohort.dims = cfg.model.visual.input_dims;
        cfg.cohort.n_rois = cfg.model.network.n_rois;
        cfg
    }

    /// Sets the cohort and split seeds from named streams of `seed`.
    pub fn with_derived_seeds(mut self) -> Self {
        self.cohort.seed = stream_seed(self.seed, "cohort");
        self.eval.split.seed = stream_seed(self.seed, "split");
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate().map_err(|e| scoped("cohort", e))?;
        self.recipe.validate().map_err(|e| scoped("recipe", e))?;
        self.model.validate().map_err(|e| scoped("model", e))?;
        self.hyper.validate().map_err(|e| scoped("hyper", e))?;
        self.eval.validate().map_err(|e| scoped("eval", e))?;
        if self.cohort.n_rois != self.model.network.n_rois {
            return Err(Error::invalid(
                "model.network.n_rois",
                format!("must equal cohort.n_rois = {}, got {}", self.cohort.n_rois, self.model.network.n_rois),
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: Config = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            if msg.starts_with("unknown field `") {
                Error::UnknownKey(path)
            } else if inner.is_data() {
                Error::invalid(path, msg)
            } else {
                Error::Parse(msg)
            }
        })?;
        de.end().map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads, fills defaults, and validates a JSON config file.
pub fn load_config(path: &Path) -> Result<Config> {
    Config::from_json(&std::fs::read_to_string(path)?)
}
