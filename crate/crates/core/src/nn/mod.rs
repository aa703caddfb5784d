//! Feed-forward network engine: model description, flat parameters,
//! forward/backward passes with PSP capture, SGD training and checkpoints.

pub mod checkpoint;
mod layers;
mod model;
mod network;
mod params;
mod train;

pub use checkpoint::Checkpoint;
pub use model::{Activation, LayerKind, LayerSpec, ModelConfig, Shape};
pub use network::{gate, ForwardTrace, Metrics, Network, TraceLayer};
pub use params::{ParamLayout, ParamPosition, ParamTensor, ParamVector, TensorRole, TensorSlot};
pub use train::{
    metrics_csv, sgd_step, train, EpochMetrics, Sgd, TrainConfig, TrainData, TrainRecord, TrainSession,
};
