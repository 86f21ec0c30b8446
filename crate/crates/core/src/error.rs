use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid control grid: {0}")]
    InvalidGrid(String),
    #[error("degenerate control grid: TPS kernel system is singular")]
    DegenerateGrid,
    #[error("warp error: {0}")]
    Warp(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid label code {0}")]
    InvalidLabel(u8),
    #[error("no physical region is imaged by all sequences")]
    EmptyOverlap,
    #[error("volume `{0}` has no usable affine")]
    MissingAffine(String),
    #[error("image has zero variance; cannot Z-score")]
    ZeroVariance,
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("remote myocardium has {0} pixels; at least 10 are required")]
    UnreliableRemote(usize),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] umyops_tensor::TensorError),
    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
