//! Train small ReLU networks, sparsify them with one-shot or gradual pruning,
//! and probe the resulting minima: 2D loss planes, top Hessian eigenvalues
//! and class-conditional entropy of ReLU gating states (PSP-entropy).
//!
//! Parameters of every model live in one flat [`ParamVector`]; masks, planes,
//! Hessian-vector products and checkpoints all index into that vector.

pub mod data;
pub mod error;
pub mod landscape;
pub mod linalg;
pub mod mask;
pub mod nn;
pub mod pruning;
pub mod psp;
pub mod scalar;

pub use data::{LabeledDataset, Normalization, Split};
pub use error::{Error, Result};
pub use mask::{PruneMask, Provenance};
pub use nn::{
    Activation, LayerKind, LayerSpec, ModelConfig, Network, ParamLayout, ParamVector, Shape,
    TrainConfig, TrainRecord,
};
pub use scalar::Scalar;
