//! The spike-driven tracker: diagonal template/search composition, a
//! convolutional spiking stem, spiking transformer stages and a center head.

mod config;
mod layers;
mod network;
mod plan;
mod weights;

pub use config::{ModelConfig, RegressAt, StageSpec};
pub use layers::{effective_ssa_ops, ssa_var, Act, BnUpdate, ForwardCtx, ForwardOptions, LayerRecord, SpikeMode};
pub use network::{
    argmax, decode_box, fold_bn, forward, ipl_compose, ipl_split, maps_from_tokens, snn_conv_block,
    snn_transformer_block, ssa, tokens_from_maps, tracking_head, HeadOutput, TrackResult,
};
pub use plan::{param_specs, parameter_count, plan, LayerKind, LayerOp, LayerSpec, ParamSpec, HEAD_BRANCHES};
pub use weights::{Parameter, WeightStore, WEIGHT_MAGIC, WEIGHT_VERSION};

use thiserror::Error;

use crate::autodiff::{Scalar, Tensor, TensorError};
use crate::neurons::NeuronError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter names differ: missing {missing:?}, extra {extra:?}")]
    NameMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("weight file: {0}")]
    Format(String),
    #[error("{violations} off-grid spike values entering {layer}")]
    SpikePurity { layer: String, violations: u64 },
    #[error("non-spike attention input: {0}")]
    SpikeInput(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Runs one eval-mode forward and decodes every sample.
pub fn predict<T: Scalar>(
    weights: &WeightStore<T>,
    z: &Tensor<T>,
    x: &Tensor<T>,
    mode: SpikeMode,
) -> Result<(Vec<TrackResult>, Vec<LayerRecord>), ModelError> {
    let mut ctx = ForwardCtx::new(weights, ForwardOptions::eval(mode));
    let out = forward(&mut ctx, z, x)?;
    let results = (0..out.batch()).map(|i| out.result(i)).collect();
    Ok((results, ctx.records))
}
