use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("invalid latent split: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(u8),

    #[error("mask resolution {got_w}x{got_h} does not match configured {expected}x{expected}")]
    MaskResolution {
        got_w: usize,
        got_h: usize,
        expected: usize,
    },

    #[error("fusion weight {0} outside [0, 1]")]
    InvalidFusionWeight(f64),

    #[error("backbone unavailable: {0}")]
    BackboneUnavailable(String),

    #[error("corrupt weights for {kind}: {reason}")]
    CorruptWeights { kind: String, reason: String },

    #[error("label {0} is not a valid parser class")]
    InvalidLabel(u8),

    #[error("contrastive loss needs at least one negative key")]
    NoNegatives,

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("embedding has zero norm")]
    ZeroNormEmbedding,

    #[error("no eyeglasses pixels found")]
    EmptyMask,

    #[error("no face found: {0}")]
    NoFace(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("weight for term `{term}` is not part of stage {stage}")]
    UnexpectedWeight { term: &'static str, stage: String },

    #[error("stage {stage} is missing term `{term}`")]
    MissingTerm { term: &'static str, stage: String },

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("stage {stage} requires a completed {required} checkpoint")]
    StageOrder { stage: String, required: String },

    #[error("corrupt checkpoint at {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("checkpoint config hash {found} does not match current config {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("checkpoint stage {found} cannot resume stage {expected}")]
    ResumeStageMismatch { expected: String, found: String },

    #[error("non-finite loss at iteration {iteration}; batch dumped to {dump}")]
    NonFiniteLoss { iteration: usize, dump: PathBuf },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("config: {0}")]
    Config(String),

    #[error("decode: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
