//! Miniature style-based generator: mapping network `f: Z → W`, synthesis
//! network `g: W → image`, checkpoint I/O and cost accounting.

mod checkpoint;
mod config;
mod cost;
mod forward;
mod weights;

pub use checkpoint::{
    decode_checkpoint, decode_container, encode_checkpoint, encode_container, load_checkpoint, read_container,
    save_checkpoint, write_container, CheckpointError, Container, MAGIC,
};
pub use config::{GeneratorConfig, BASE_RESOLUTION};
pub use cost::{conv_flops, count_flops, count_params, linear_flops, param_breakdown, ParamBreakdown};
pub use forward::{
    map_batch, map_latent, mapping_forward, synthesis_forward, synthesis_tensor_names, synthesize, synthesize_batch,
    truncate, ForwardOptions, GraphParams, LatentSpace, LatentVector, SynthesisOutput, DEMOD_EPS, LRELU_SLOPE,
    NOISE_STRENGTH,
};
pub use weights::{
    init_generator, mapping_bias, mapping_weight, tensor_specs, BlockNames, GeneratorWeights, TensorRole, TensorSpec,
    CONST,
};

use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{what} has shape {actual:?}, expected width {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("latent contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[cfg(test)]
mod tests;
