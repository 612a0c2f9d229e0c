use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("batch normalization in training mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("forward cache does not belong to this model state: {0}")]
    StaleCache(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },

    #[error("schedule misconfigured: {0}")]
    Schedule(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("infinite divergence: {0}")]
    InfiniteDivergence(String),

    #[error("evidence is zero; the likelihood never overlaps the model distribution")]
    ZeroEvidence,

    #[error("no teacher for client {0}")]
    MissingTeacher(usize),

    #[error("heterogeneous architectures: {0}")]
    Heterogeneous(String),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(e),
            },
        }
    }
}
