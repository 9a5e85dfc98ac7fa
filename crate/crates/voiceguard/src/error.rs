//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Input shorter than one analysis window.
    #[error("input too short: {len} samples, need at least {min} for this operation")]
    TooShort { len: usize, min: usize },

    /// Two spectral or sample buffers that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// Transform parameters do not match the ones the data was produced with.
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    /// Resampling target outside the supported set.
    #[error("unsupported sample rate {0} Hz")]
    UnsupportedRate(u32),

    /// Filter cutoff at or above the Nyquist frequency.
    #[error("cutoff {cutoff} Hz not below Nyquist {nyquist} Hz")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },

    /// An operation that needs at least one element got none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Not enough voiced content for a metric that needs it.
    #[error("insufficient voiced content: {got} voiced frames, need {need}")]
    InsufficientVoiced { got: usize, need: usize },

    /// Clip too short for STOI; callers may skip the STOI term.
    #[error("clip too short for STOI ({got_ms} ms voiced, need {need_ms} ms); skip the STOI term")]
    StoiTooShort { got_ms: f64, need_ms: f64 },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A loss became non-finite during optimization.
    #[error("non-finite loss at epoch {epoch}: {value}")]
    NonFiniteLoss { epoch: usize, value: f64 },

    /// Malformed or incompatible model file.
    #[error("model file error: {0}")]
    ModelFormat(String),

    /// Malformed audio file.
    #[error("audio file error: {0}")]
    AudioFormat(String),

    /// Query budget too small for one NES iteration.
    #[error("query budget {budget} below one population round of {need}")]
    BudgetTooSmall { budget: usize, need: usize },

    /// The external ASR endpoint could not be reached or answered badly.
    #[error("asr endpoint error: {0}")]
    AsrEndpoint(String),

    /// SNR is undefined for an all-zero reference signal.
    #[error("snr undefined: reference signal has zero energy")]
    ZeroSignal,

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
