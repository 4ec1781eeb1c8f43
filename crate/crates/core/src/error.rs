use thiserror::Error;

/// Errors raised anywhere in the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("signal is all zero or empty")]
    DegenerateSignal,

    #[error("signal contains a non-finite sample at index {0}")]
    NonFiniteSample(usize),

    #[error("peak must be strictly positive, got {0}")]
    NonPositivePeak(f64),

    #[error("prediction and reference sets do not match: {0}")]
    MismatchedSets(String),

    #[error("reference signal {index} has non-positive maximum {peak}")]
    NonPositiveReferencePeak { index: usize, peak: f64 },

    #[error("invalid pulse parameters: {0}")]
    InvalidPulseParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid frequency range: {0}")]
    InvalidRange(String),

    #[error("natural frequency {freq} Hz is at or above Nyquist ({nyquist} Hz)")]
    FrequencyAboveNyquist { freq: f64, nyquist: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("tape was recorded against different parameters")]
    StaleTape,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("decoder output is numerically zero (max |y_n| = {0:e})")]
    DegenerateDecode(f64),

    #[error("training set is empty")]
    EmptyDataset,

    #[error("invalid cutoff {cutoff} Hz for sample rate {sample_rate} Hz")]
    InvalidCutoff { cutoff: f64, sample_rate: f64 },

    #[error("filter with {taps} taps is too long for a {len}-sample signal")]
    FilterTooLong { taps: usize, len: usize },

    #[error("normal equations are singular")]
    SingularSystem,

    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("method `{0}` requires a model that was not supplied")]
    MissingModelForMethod(String),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
