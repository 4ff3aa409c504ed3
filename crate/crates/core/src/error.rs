use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty mesh: {0}")]
    EmptyMesh(String),
    #[error("OBJ parse error at line {line}: {message}")]
    ObjParse { line: usize, message: String },
    #[error("PLY error: {0}")]
    Ply(String),
    #[error("missing property {0}")]
    MissingProperty(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("no mixture component matches conditioning tag {0:?}")]
    NoMatchingComponent(String),
    #[error("stride {stride} must be < timestep {t}")]
    StrideTooLarge { stride: usize, t: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
