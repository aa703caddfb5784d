use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plane::PlaneSpec;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{Network, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    TrainLoss,
    TestError,
    PspL2,
    #[serde(rename = "psp_entropy_1")]
    PspEntropy1,
    #[serde(rename = "psp_entropy_2")]
    PspEntropy2,
    HessianTopk,
}

impl FieldKind {
    pub const ALL: [FieldKind; 6] = [
        FieldKind::TrainLoss,
        FieldKind::TestError,
        FieldKind::PspL2,
        FieldKind::PspEntropy1,
        FieldKind::PspEntropy2,
        FieldKind::HessianTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FieldKind::TrainLoss => "train_loss",
            FieldKind::TestError => "test_error",
            FieldKind::PspL2 => "psp_l2",
            FieldKind::PspEntropy1 => "psp_entropy_1",
            FieldKind::PspEntropy2 => "psp_entropy_2",
            FieldKind::HessianTopk => "hessian_topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FieldKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown field `{s}`")))
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A scalar (or fixed-width vector) field over parameter space.
///
/// Implementations must be pure: the same point always yields the same values.
pub trait FieldEvaluator: Sync {
    fn kind(&self) -> FieldKind;

    /// Number of values per cell.
    fn width(&self) -> usize {
        1
    }

    fn evaluate(&self, params: &ParamVector<f32>) -> Result<Vec<f64>>;
}

/// Mean cross-entropy on a dataset (normally the training set).
pub struct LossField<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledDataset,
}

impl FieldEvaluator for LossField<'_> {
    fn kind(&self) -> FieldKind {
        FieldKind::TrainLoss
    }

    fn evaluate(&self, params: &ParamVector<f32>) -> Result<Vec<f64>> {
        Ok(vec![self.net.evaluate(params.values(), self.data)?.loss])
    }
}

/// Misclassification rate on a dataset (normally the test set).
pub struct ErrorField<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledDataset,
}

impl FieldEvaluator for ErrorField<'_> {
    fn kind(&self) -> FieldKind {
        FieldKind::TestError
    }

    fn evaluate(&self, params: &ParamVector<f32>) -> Result<Vec<f64>> {
        Ok(vec![1.0 - self.net.evaluate(params.values(), self.data)?.accuracy])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub field: FieldKind,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub width: usize,
    /// Row-major over `(alpha, beta)`; `width` values per cell.
    pub values: Vec<f64>,
    /// Cells whose evaluation overflowed or produced non-finite values.
    pub diverged: Vec<bool>,
}

impl GridResult {
    pub fn shape(&self) -> (usize, usize) {
        (self.alphas.len(), self.betas.len())
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let c = i * self.betas.len() + j;
        &self.values[c * self.width..(c + 1) * self.width]
    }

    pub fn is_diverged(&self, i: usize, j: usize) -> bool {
        self.diverged[i * self.betas.len() + j]
    }

    /// First component of every cell as an `|alphas| × |betas|` matrix.
    pub fn primary(&self) -> ndarray::Array2<f64> {
        let (na, nb) = self.shape();
        ndarray::Array2::from_shape_fn((na, nb), |(i, j)| self.cell(i, j)[0])
    }

    /// Min and max of the first component over non-diverged cells.
    pub fn range(&self) -> Option<(f64, f64)> {
        let (na, nb) = self.shape();
        let mut r: Option<(f64, f64)> = None;
        for i in 0..na {
            for j in 0..nb {
                if self.is_diverged(i, j) {
                    continue;
                }
                let v = self.cell(i, j)[0];
                r = Some(match r {
                    None => (v, v),
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                });
            }
        }
        r
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta,value");
        for k in 2..=self.width {
            let _ = write!(s, ",value_{k}");
        }
        s.push('\n');
        let (na, nb) = self.shape();
        for i in 0..na {
            for j in 0..nb {
                let _ = write!(s, "{},{}", self.alphas[i], self.betas[j]);
                for v in self.cell(i, j) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Evaluates `field` at every `point_at(α, β)`. Cells are independent, so the
/// result does not depend on evaluation order or thread count.
pub fn eval_grid(plane: &PlaneSpec, alphas: &[f64], betas: &[f64], field: &dyn FieldEvaluator) -> Result<GridResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("grid must have at least one alpha and one beta".into()));
    }
    let width = field.width();
    let cells: Vec<(usize, usize)> =
        (0..alphas.len()).flat_map(|i| (0..betas.len()).map(move |j| (i, j))).collect();
    let evaluated: Vec<Result<(Vec<f64>, bool)>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let p = plane.point_at(alphas[i], betas[j]);
            match field.evaluate(&p) {
                Ok(v) if v.len() != width => Err(Error::Config(format!(
                    "field {} returned {} values, expected {width}",
                    field.kind(),
                    v.len()
                ))),
                Ok(v) => {
                    let bad = v.iter().any(|x| !x.is_finite());
                    Ok((v, bad))
                }
                Err(e) if e.is_numeric() => Ok((vec![f64::NAN; width], true)),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut values = Vec::with_capacity(cells.len() * width);
    let mut diverged = Vec::with_capacity(cells.len());
    for r in evaluated {
        let (v, bad) = r?;
        values.extend(v);
        diverged.push(bad);
    }
    Ok(GridResult { field: field.kind(), alphas: alphas.to_vec(), betas: betas.to_vec(), width, values, diverged })
}
