use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported sampling rate {0} Hz (32 ms is not a whole number of samples)")]
    UnsupportedRate(u32),
    #[error("empty signal")]
    EmptySignal,
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("output length {requested} is inconsistent with {frames} frames at hop {hop}")]
    InconsistentLength {
        requested: usize,
        frames: usize,
        hop: usize,
    },
    #[error("estimate has zero energy")]
    ZeroEnergyEstimate,
    #[error("reference has zero energy")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("training: {0}")]
    Training(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
