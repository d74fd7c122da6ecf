use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape incompatible: {0:?} vs {1:?}")]
    ShapeIncompatible(Vec<usize>, Vec<usize>),
    #[error("kernel exceeds padded input")]
    KernelExceedsInput,
    #[error("backward requires scalar, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("no distillation layers")]
    NoDistillLayers,
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("invalid bin spec: {0}")]
    InvalidBins(&'static str),
    #[error("scene size {height}x{width} is not divisible by 32")]
    SceneSize { height: usize, width: usize },
    #[error("unknown fusion kind `{0}`")]
    UnknownFusion(String),
    #[error("unknown distillation layer `{0}`")]
    UnknownLayer(String),
    #[error("invalid model spec: {0}")]
    InvalidModel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at epoch {epoch}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { epoch: usize, loss: f64, initial: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("verification failed: {0}")]
    Verification(String),
}
