//! Sparsification: one-shot magnitude pruning, the retraining variants used
//! to probe pruned structures (rewind, random re-init, random structure) and
//! a gradual sensitivity-driven prune-while-training loop.

mod gradual;
mod oneshot;
mod retrain;

pub use gradual::{
    gradual_prune, prune_scores, trajectory_csv, GradualOutcome, GradualSchedule, HaltReason, ScoreKind,
    TrajectoryPoint,
};
pub use oneshot::{one_shot_prune, one_shot_prune_count};
pub use retrain::{random_reinit, random_structure, retrain, rewind, RetrainStrategy};

pub use crate::mask::{compression_rate, Provenance, PruneMask};
