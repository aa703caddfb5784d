use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{LayerKind, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
}

/// One parameter tensor inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSlot {
    pub layer: usize,
    pub role: TensorRole,
    /// Row-major shape: `(out, in)` for dense weights, `(out, in, k, k)` for conv weights.
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Inputs feeding one output unit; drives initialization scale.
    pub fan_in: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Weights are prunable, biases are not.
    pub fn prunable(&self) -> bool {
        self.role == TensorRole::Weight
    }
}

/// Where a flat index lands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPosition {
    pub slot: usize,
    pub layer: usize,
    pub role: TensorRole,
    pub index: Vec<usize>,
}

/// Ordered map between flat indices and `(layer, tensor, row-major index)`.
///
/// Slots are laid out layer by layer, weight before bias, with no gaps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<TensorSlot>,
    len: usize,
}

impl ParamLayout {
    pub fn for_model(config: &ModelConfig) -> Result<Self> {
        let shapes = config.resolve_shapes()?;
        let mut slots = Vec::new();
        let mut offset = 0;
        for (l, (spec, (input, output))) in config.layers.iter().zip(&shapes).enumerate() {
            let (wshape, fan_in, outputs) = match spec.kind {
                LayerKind::Dense { outputs } => {
                    (vec![outputs, input.features()], input.features(), outputs)
                }
                LayerKind::Conv2d { kernel, .. } => (
                    vec![output.channels, input.channels, kernel, kernel],
                    input.channels * kernel * kernel,
                    output.channels,
                ),
                _ => continue,
            };
            let w = TensorSlot { layer: l, role: TensorRole::Weight, shape: wshape, offset, fan_in };
            offset += w.len();
            let b = TensorSlot {
                layer: l,
                role: TensorRole::Bias,
                shape: vec![outputs],
                offset,
                fan_in,
            };
            offset += b.len();
            slots.push(w);
            slots.push(b);
        }
        Ok(ParamLayout { slots, len: offset })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn slot_for(&self, layer: usize, role: TensorRole) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.layer == layer && s.role == role)
    }

    pub fn slot_index_of(&self, flat: usize) -> Option<usize> {
        if flat >= self.len {
            return None;
        }
        // slots are sorted by offset
        Some(self.slots.partition_point(|s| s.offset + s.len() <= flat))
    }

    pub fn locate(&self, flat: usize) -> Option<ParamPosition> {
        let si = self.slot_index_of(flat)?;
        let slot = &self.slots[si];
        let mut rem = flat - slot.offset;
        let mut index = vec![0; slot.shape.len()];
        for (d, &extent) in slot.shape.iter().enumerate().rev() {
            index[d] = rem % extent;
            rem /= extent;
        }
        Some(ParamPosition { slot: si, layer: slot.layer, role: slot.role, index })
    }

    pub fn flat_index(&self, layer: usize, role: TensorRole, index: &[usize]) -> Option<usize> {
        let slot = self.slot_for(layer, role)?;
        if index.len() != slot.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&slot.shape) {
            if i >= extent {
                return None;
            }
            flat = flat * extent + i;
        }
        Some(slot.offset + flat)
    }

    /// Per-coordinate prunability (weights true, biases false).
    pub fn prunable_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len];
        for s in &self.slots {
            if s.prunable() {
                flags[s.range()].iter_mut().for_each(|f| *f = true);
            }
        }
        flags
    }

    pub fn prunable_count(&self) -> usize {
        self.slots.iter().filter(|s| s.prunable()).map(TensorSlot::len).sum()
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases.
    pub fn kaiming_init(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; self.len];
        for s in &self.slots {
            if s.role != TensorRole::Weight {
                continue;
            }
            let bound = (6.0 / s.fan_in as f64).sqrt() as f32;
            for v in &mut values[s.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        values
    }
}

/// One tensor of an unflattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<F> {
    pub layer: usize,
    pub role: TensorRole,
    pub data: ArrayD<F>,
}

/// Flat, ordered view of all model parameters.
#[derive(Clone, Debug)]
pub struct ParamVector<F = f32> {
    layout: Arc<ParamLayout>,
    values: Vec<F>,
}

impl<F: PartialEq> PartialEq for ParamVector<F> {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.values == other.values
    }
}

impl<F: Scalar> ParamVector<F> {
    pub fn new(layout: Arc<ParamLayout>, values: Vec<F>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![F::zero(); layout.len()];
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn cast<G: Scalar>(&self) -> ParamVector<G> {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<F>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn same_layout(&self, other: &ParamLayout) -> bool {
        *self.layout == *other
    }

    pub fn unflatten(&self) -> Vec<ParamTensor<F>> {
        self.layout
            .slots()
            .iter()
            .map(|s| ParamTensor {
                layer: s.layer,
                role: s.role,
                data: ArrayD::from_shape_vec(IxDyn(&s.shape), self.values[s.range()].to_vec())
                    .expect("slot shape matches slot length"),
            })
            .collect()
    }

    pub fn flatten(layout: Arc<ParamLayout>, tensors: &[ParamTensor<F>]) -> Result<Self> {
        if tensors.len() != layout.slots().len() {
            return Err(Error::Layout(format!(
                "{} tensors for a layout with {} slots",
                tensors.len(),
                layout.slots().len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len());
        for (t, s) in tensors.iter().zip(layout.slots()) {
            if t.layer != s.layer || t.role != s.role || t.data.shape() != s.shape.as_slice() {
                return Err(Error::Layout(format!(
                    "tensor for layer {} {:?} does not match slot layer {} {:?} {:?}",
                    t.layer, t.role, s.layer, s.role, s.shape
                )));
            }
            values.extend(t.data.iter().copied());
        }
        Self::new(layout, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lenet300_parameter_count() {
        let layout = ParamLayout::for_model(&ModelConfig::lenet300()).unwrap();
        assert_eq!(layout.len(), 266_610);
        assert_eq!(layout.prunable_count(), 784 * 300 + 300 * 100 + 100 * 10);
    }

    #[test]
    fn lenet5_parameter_count() {
        let layout = ParamLayout::for_model(&ModelConfig::lenet5()).unwrap();
        assert_eq!(layout.len(), 520 + 25_050 + 400_500 + 5_010);
    }

    #[test]
    fn locate_and_flat_index_agree() {
        let layout = ParamLayout::for_model(&ModelConfig::lenet5()).unwrap();
        for flat in [0, 1, 499, 500, 519, 520, 25_569, 25_570, layout.len() - 1] {
            let pos = layout.locate(flat).unwrap();
            assert_eq!(layout.flat_index(pos.layer, pos.role, &pos.index), Some(flat));
        }
        assert!(layout.locate(layout.len()).is_none());
        // conv2 weight (o=1, c=2, y=3, x=4)
        let flat = layout.flat_index(2, TensorRole::Weight, &[1, 2, 3, 4]).unwrap();
        assert_eq!(flat, 520 + 1 * 500 + 2 * 25 + 3 * 5 + 4);
    }

    #[test]
    fn kaiming_init_is_seeded() {
        let layout = ParamLayout::for_model(&ModelConfig::mlp("t", 5, &[4], 3)).unwrap();
        assert_eq!(layout.kaiming_init(3), layout.kaiming_init(3));
        assert_ne!(layout.kaiming_init(3), layout.kaiming_init(4));
        let init = layout.kaiming_init(3);
        let bias = layout.slot_for(0, TensorRole::Bias).unwrap();
        assert!(init[bias.range()].iter().all(|&b| b == 0.0));
        let bound = (6.0f32 / 5.0).sqrt();
        let w = layout.slot_for(0, TensorRole::Weight).unwrap();
        assert!(init[w.range()].iter().all(|v| v.abs() <= bound));
    }

    proptest! {
        #[test]
        fn flatten_unflatten_is_bitwise_identity(seed in any::<u64>(), hidden in 1usize..6) {
            let layout = Arc::new(
                ParamLayout::for_model(&ModelConfig::mlp("p", 3, &[hidden, 2], 4)).unwrap(),
            );
            let mut values = layout.kaiming_init(seed);
            // include values that are sensitive to bit patterns
            values[0] = -0.0;
            values[1] = f32::MIN_POSITIVE / 2.0;
            let p = ParamVector::new(layout.clone(), values).unwrap();
            let back = ParamVector::flatten(layout, &p.unflatten()).unwrap();
            let a: Vec<u32> = p.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
