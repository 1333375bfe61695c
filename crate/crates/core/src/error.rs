use alloc::string::String;

/// Errors raised by the numerics, model and training code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("input too short: need at least {min} frames, got {got}")]
    InputTooShort { min: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown language id {id} (model has {count} languages)")]
    UnknownLanguage { id: usize, count: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("zero-norm vector in cosine similarity (row {row})")]
    ZeroNorm { row: usize },

    #[error("probability rows not normalized (max deviation {0:e})")]
    Unnormalized(f64),

    #[error("loss function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("variant {variant} requires the {component} loss component")]
    MissingComponent {
        variant: &'static str,
        component: &'static str,
    },

    #[error("language bucket {0} is empty but has non-zero sampling probability")]
    EmptyBucket(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss in component `{component}` at step {step}")]
    Diverged { component: &'static str, step: u64 },

    #[error("training sink failed: {0}")]
    Sink(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
