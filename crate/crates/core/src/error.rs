use thiserror::Error;

use crate::data::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: {detail}")]
    Dimension { layer: usize, detail: String },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("non-finite loss: {0}")]
    NumericOverflow(String),

    #[error("training diverged in epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        record: Box<crate::nn::TrainRecord>,
    },

    #[error("gradual pruning collapsed to chance accuracy at step {step}")]
    PruningCollapsed {
        step: u64,
        partial: Box<crate::pruning::GradualOutcome>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layout mismatch: {0}")]
    Layout(String),

    #[error("degenerate plane: the two anchors are identical")]
    DegeneratePlane,

    #[error("class {0} has no samples in the evaluation set")]
    MissingClass(usize),

    #[error("neuron pair spans layers {0} and {1}; pairs must lie within one layer")]
    CrossLayerPair(usize, usize),

    #[error("per-sample gate bits were not retained in this trace")]
    GatesNotRetained,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by numbers going bad rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow(_) | Error::Diverged { .. } | Error::PruningCollapsed { .. }
        )
    }
}
