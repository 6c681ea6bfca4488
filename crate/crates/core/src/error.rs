use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("track generation failed after {attempts} attempts (seed {seed})")]
    TrackGeneration { seed: u64, attempts: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite action component for agent {agent}: {value}")]
    NonFiniteAction { agent: usize, value: f64 },
    #[error("episode already finished after {0} steps")]
    EpisodeFinished(usize),
    #[error("invalid visitation order {0}; expected 1 or 2")]
    VisitationOrder(u8),
    #[error("tile {tile} credited twice to agent {agent}")]
    DuplicateCredit { tile: usize, agent: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("non-finite model loss: {0}")]
    NonFiniteLoss(String),
    #[error("non-finite latent state at step {step}")]
    NonFiniteLatent { step: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("insufficient replay data: {0}")]
    InsufficientData(String),
    #[error("sequence crosses an episode boundary")]
    EpisodeBoundary,
    #[error("unsupported for this model variant: {0}")]
    Unsupported(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
