use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("axis {axis} out of bounds for rank {rank}")]
    AxisOutOfBounds { axis: usize, rank: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not connected to any tensor that requires grad")]
    DetachedGraph,
    #[error("point ({x}, {y}) outside image of size {height}x{width}")]
    PointOutOfBounds {
        x: f64,
        y: f64,
        height: usize,
        width: usize,
    },
    #[error("kernel width must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("size {height}x{width} is not divisible by {factor}")]
    IndivisibleShape {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("every support sample is degenerate (no crowd density under the support annotation)")]
    AllSamplesDegenerate,
    #[error(
        "support image `{image}` carries no crowd density; annotate at least one head inside the \
         region of interest or pick another support image"
    )]
    DegenerateSupport { image: String },
    #[error("scene `{scene_id}` has {images} image(s); an episode needs at least 2")]
    SceneTooSmall { scene_id: String, images: usize },
    #[error("crop {crop:?} larger than image {image:?}")]
    CropTooLarge {
        crop: (usize, usize),
        image: (usize, usize),
    },
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for config key `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("{0}")]
    Data(String),
}
