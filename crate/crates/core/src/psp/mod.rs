//! Class-conditional statistics of ReLU gates: PSP L2 norms and first/second
//! order PSP-entropy in bits.

mod entropy;
mod trace;

use serde::{Deserialize, Serialize};

pub use entropy::{
    entropy_bits, first_order_entropy, second_order_entropy, Aggregation, EntropyReport, EntropySummary,
    LayerValue, PairSelection, UnitEntropy, UnitId,
};
pub use trace::{capture_states, ActivationTrace, LayerGates};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::landscape::{eval_grid, FieldEvaluator, FieldKind, GridResult, PlaneSpec};
use crate::nn::{Network, ParamVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PspNorm {
    /// Mean `z²` over every sample and hidden unit.
    pub network: f64,
    pub per_layer: Vec<LayerValue>,
    /// Mean `z²` over samples, per unit, layers concatenated.
    pub per_neuron: Vec<f64>,
}

pub fn psp_l2(trace: &ActivationTrace) -> PspNorm {
    let n = trace.samples() as f64;
    let mut total = 0.0;
    let mut per_layer = Vec::new();
    let mut per_neuron = Vec::with_capacity(trace.total_units());
    for lg in trace.layers() {
        let s: f64 = lg.z2.iter().sum();
        total += s;
        per_layer.push(LayerValue { layer: lg.layer, value: s / (n * lg.units as f64) });
        per_neuron.extend(lg.z2.iter().map(|z| z / n));
    }
    PspNorm { network: total / (n * trace.total_units() as f64), per_layer, per_neuron }
}

/// Network-mean `z²` as a grid field.
pub struct PspL2Field<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledDataset,
}

impl FieldEvaluator for PspL2Field<'_> {
    fn kind(&self) -> FieldKind {
        FieldKind::PspL2
    }

    fn evaluate(&self, params: &ParamVector<f32>) -> Result<Vec<f64>> {
        let t = capture_states(self.net, params.values(), self.data, false)?;
        Ok(vec![psp_l2(&t).network])
    }
}

/// Aggregated PSP-entropy of the given order as a grid field.
pub struct EntropyField<'a> {
    pub net: &'a Network,
    pub data: &'a LabeledDataset,
    pub order: u8,
    pub selection: PairSelection,
    pub aggregation: Aggregation,
}

impl EntropyField<'_> {
    pub fn report(&self, params: &[f32]) -> Result<EntropyReport> {
        match self.order {
            1 => first_order_entropy(&capture_states(self.net, params, self.data, false)?),
            2 => second_order_entropy(&capture_states(self.net, params, self.data, true)?, &self.selection),
            o => Err(Error::Config(format!("entropy order must be 1 or 2, got {o}"))),
        }
    }
}

impl FieldEvaluator for EntropyField<'_> {
    fn kind(&self) -> FieldKind {
        if self.order == 2 {
            FieldKind::PspEntropy2
        } else {
            FieldKind::PspEntropy1
        }
    }

    fn evaluate(&self, params: &ParamVector<f32>) -> Result<Vec<f64>> {
        Ok(vec![self.report(params.values())?.aggregate(self.aggregation)])
    }
}

/// PSP-entropy of `order` over the plane.
pub fn entropy_field(
    plane: &PlaneSpec,
    alphas: &[f64],
    betas: &[f64],
    net: &Network,
    data: &LabeledDataset,
    order: u8,
    selection: PairSelection,
    aggregation: Aggregation,
) -> Result<GridResult> {
    if order != 1 && order != 2 {
        return Err(Error::Config(format!("entropy order must be 1 or 2, got {order}")));
    }
    eval_grid(plane, alphas, betas, &EntropyField { net, data, order, selection, aggregation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landscape::build_plane;
    use crate::nn::{ModelConfig, Shape};
    use crate::Split;
    use ndarray::array;

    #[test]
    fn single_neuron_mean_square() {
        let z = array![[3.0], [-1.0]];
        let t = ActivationTrace::from_psp(&[0, 1], 2, &[(0, z.view())], false).unwrap();
        assert_eq!(psp_l2(&t).network, 5.0);
    }

    #[test]
    fn zero_network_has_zero_norm() {
        let net = Network::new(ModelConfig::mlp("z", 3, &[4], 2)).unwrap();
        let p = ParamVector::<f32>::zeros(net.layout().clone());
        let d = LabeledDataset::new(
            ndarray::Array2::from_elem((4, 3), 1.0),
            vec![0, 1, 0, 1],
            Shape::flat(3),
            Split::Train,
            2,
        )
        .unwrap();
        let t = capture_states(&net, p.values(), &d, false).unwrap();
        assert_eq!(psp_l2(&t).network, 0.0);
    }

    #[test]
    fn layer_breakdown_weights_by_units() {
        let z1 = array![[1.0, 1.0], [1.0, 1.0]];
        let z2 = array![[4.0], [0.0]];
        let t = ActivationTrace::from_psp(&[0, 0], 1, &[(0, z1.view()), (2, z2.view())], false).unwrap();
        let n = psp_l2(&t);
        assert_eq!(n.per_layer, vec![LayerValue { layer: 0, value: 1.0 }, LayerValue { layer: 2, value: 8.0 }]);
        assert!((n.network - 20.0 / 6.0).abs() < 1e-15);
        assert_eq!(n.per_neuron, vec![1.0, 1.0, 8.0]);
    }

    #[test]
    fn anchor_cell_matches_standalone_entropy() {
        let net = Network::new(ModelConfig::mlp("e", 4, &[6, 5], 3)).unwrap();
        let x = ndarray::Array2::from_shape_fn((90, 4), |(i, j)| ((i * 4 + j) as f32 * 0.29).sin());
        let y = (0..90).map(|i| (i % 3) as u8).collect();
        let d = LabeledDataset::new(x, y, Shape::flat(4), Split::Train, 3).unwrap();
        let a = net.init_params(1);
        let p = build_plane(&a, &net.init_params(2), 0).unwrap();
        for order in [1u8, 2] {
            let g = entropy_field(&p, &[0.0], &[0.0], &net, &d, order, PairSelection::Exhaustive, Aggregation::Mean)
                .unwrap();
            let t = capture_states(&net, a.values(), &d, true).unwrap();
            let r = if order == 1 {
                first_order_entropy(&t).unwrap()
            } else {
                second_order_entropy(&t, &PairSelection::Exhaustive).unwrap()
            };
            assert_eq!(g.cell(0, 0)[0], r.mean());
        }
        assert!(entropy_field(&p, &[0.0], &[0.0], &net, &d, 3, PairSelection::Exhaustive, Aggregation::Mean).is_err());
    }
}
