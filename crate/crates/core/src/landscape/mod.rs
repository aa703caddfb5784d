//! Interpolation planes between two solutions, fields evaluated over them,
//! and Hessian spectra.

mod grid;
mod hessian;
mod plane;

pub use grid::{eval_grid, linspace, ErrorField, FieldEvaluator, FieldKind, GridResult, LossField};
pub use hessian::{
    default_step, fd_hvp, hvp, power_topk, top_k_eigenvalues, EigenConfig, EigenPair, HessianField, NetworkHessian,
};
pub use plane::{build_plane, values_digest, PlaneMetadata, PlaneSpec};
