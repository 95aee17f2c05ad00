use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNorm { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("missing gradient for parameter `{name}`")]
    MissingGradient { name: String },

    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid cohort spec: {0}")]
    BadCohortSpec(String),

    #[error("ROI {roi} has zero variance")]
    ZeroVarianceRoi { roi: usize },

    #[error("mask ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),

    #[error("invalid model config: {0}")]
    BadConfig(String),

    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),

    #[error("invalid training hyperparameters: {0}")]
    BadHyper(String),

    #[error("class {class} has {available} embeddings, fewer than r = {r}")]
    TooFewReferences { class: usize, available: usize, r: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("class {0} is absent from the training labels")]
    DegenerateLabels(usize),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("AUC is only defined for binary labels, found {0} classes")]
    AucOnMulticlass(usize),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config value at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), message: message.into() }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Validation { .. }
                | Error::UnknownKey(_)
                | Error::BadCohortSpec(_)
                | Error::BadConfig(_)
                | Error::BadHyper(_)
                | Error::BadRatio(_)
                | Error::TooFewReferences { .. }
                | Error::TooFewSamples { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
