use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{gate, Network};

const CHUNK: usize = 1000;

/// Gate statistics of one hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGates {
    /// Network layer index.
    pub layer: usize,
    pub units: usize,
    /// `on[u * classes + c]`: samples of class `c` with unit `u` active.
    pub on: Vec<u64>,
    /// Per-unit sum of `z²` over all samples.
    pub z2: Vec<f64>,
    /// Per-unit packed gate bits in class-grouped sample order, `words` u64 per unit.
    bits: Option<Vec<u64>>,
}

impl LayerGates {
    pub fn on_count(&self, unit: usize, class: usize, classes: usize) -> u64 {
        self.on[unit * classes + class]
    }
}

/// Exact per-class gate counts, `z²` sums and (optionally) per-sample gate bits
/// for every hidden ReLU unit over one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    classes: usize,
    class_counts: Vec<u64>,
    /// First word of each class segment; every segment starts word-aligned.
    word_offsets: Vec<usize>,
    words: usize,
    layers: Vec<LayerGates>,
}

impl ActivationTrace {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn samples(&self) -> u64 {
        self.class_counts.iter().sum()
    }

    pub fn layers(&self) -> &[LayerGates] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerGates> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn has_bits(&self) -> bool {
        self.layers.iter().all(|l| l.bits.is_some())
    }

    pub fn total_units(&self) -> usize {
        self.layers.iter().map(|l| l.units).sum()
    }

    /// Joint on-counts `(n₁₁, n₁(a), n₁(b))` of two units of one layer within class `c`.
    pub fn joint_on(&self, layer: &LayerGates, a: usize, b: usize, c: usize) -> Result<(u64, u64, u64)> {
        let bits = layer.bits.as_ref().ok_or(Error::GatesNotRetained)?;
        let (s, e) = (self.word_offsets[c], self.word_offsets[c + 1]);
        let wa = &bits[a * self.words + s..a * self.words + e];
        let wb = &bits[b * self.words + s..b * self.words + e];
        let both = wa.iter().zip(wb).map(|(x, y)| (x & y).count_ones() as u64).sum();
        Ok((both, layer.on_count(a, c, self.classes), layer.on_count(b, c, self.classes)))
    }

    /// Builds a trace from per-layer pre-activations `(samples, units)`.
    pub fn from_psp(
        labels: &[u8],
        classes: usize,
        layers: &[(usize, ArrayView2<f64>)],
        keep_bits: bool,
    ) -> Result<Self> {
        let mut b = TraceBuilder::new(labels, classes, layers.iter().map(|(l, z)| (*l, z.ncols())).collect(), keep_bits)?;
        b.add(0, labels, layers.iter().map(|(_, z)| z.view()).collect())?;
        Ok(b.finish())
    }

    /// Builds a trace directly from gate states, with `z = 1` for active and `z = 0` for inactive units.
    pub fn from_gates(labels: &[u8], classes: usize, layers: &[(usize, ArrayView2<bool>)]) -> Result<Self> {
        let z: Vec<(usize, ndarray::Array2<f64>)> =
            layers.iter().map(|(l, g)| (*l, g.mapv(|on| if on { 1.0 } else { 0.0 }))).collect();
        Self::from_psp(labels, classes, &z.iter().map(|(l, a)| (*l, a.view())).collect::<Vec<_>>(), true)
    }
}

/// Streaming accumulator: samples may arrive in any chunking as long as each
/// chunk states its first sample index.
struct TraceBuilder {
    classes: usize,
    class_counts: Vec<u64>,
    /// Bit position of every sample in class-grouped order.
    position: Vec<usize>,
    word_offsets: Vec<usize>,
    words: usize,
    layers: Vec<LayerGates>,
}

impl TraceBuilder {
    fn new(labels: &[u8], classes: usize, shapes: Vec<(usize, usize)>, keep_bits: bool) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if shapes.is_empty() {
            return Err(Error::Model("network has no hidden ReLU layer".into()));
        }
        let mut class_counts = vec![0u64; classes];
        for &l in labels {
            let c = l as usize;
            if c >= classes {
                return Err(Error::Config(format!("label {c} outside {classes} classes")));
            }
            class_counts[c] += 1;
        }
        let mut word_offsets = Vec::with_capacity(classes + 1);
        let mut w = 0;
        for &n in &class_counts {
            word_offsets.push(w);
            w += (n as usize).div_ceil(64);
        }
        word_offsets.push(w);
        let mut seen = vec![0usize; classes];
        let position = labels
            .iter()
            .map(|&l| {
                let c = l as usize;
                let p = word_offsets[c] * 64 + seen[c];
                seen[c] += 1;
                p
            })
            .collect();
        let layers = shapes
            .into_iter()
            .map(|(layer, units)| LayerGates {
                layer,
                units,
                on: vec![0; units * classes],
                z2: vec![0.0; units],
                bits: keep_bits.then(|| vec![0u64; units * w]),
            })
            .collect();
        Ok(TraceBuilder { classes, class_counts, position, word_offsets, words: w, layers })
    }

    fn add(&mut self, first: usize, labels: &[u8], psp: Vec<ArrayView2<f64>>) -> Result<()> {
        for (lg, z) in self.layers.iter_mut().zip(psp) {
            if z.ncols() != lg.units || z.nrows() != labels.len() {
                return Err(Error::Dimension { layer: lg.layer, detail: "trace chunk has the wrong shape".into() });
            }
            for u in 0..lg.units {
                let col = z.column(u);
                let mut sq = 0.0;
                for (s, (&zv, &l)) in col.iter().zip(labels).enumerate() {
                    sq += zv * zv;
                    if gate(zv) {
                        lg.on[u * self.classes + l as usize] += 1;
                        if let Some(bits) = lg.bits.as_mut() {
                            let p = self.position[first + s];
                            bits[u * self.words + p / 64] |= 1u64 << (p % 64);
                        }
                    }
                }
                lg.z2[u] += sq;
            }
        }
        Ok(())
    }

    fn finish(self) -> ActivationTrace {
        ActivationTrace {
            classes: self.classes,
            class_counts: self.class_counts,
            word_offsets: self.word_offsets,
            words: self.words,
            layers: self.layers,
        }
    }
}

/// Runs the network over `data` and records every hidden unit's gate.
///
/// Chunks are forwarded in parallel and merged in sample order, so the trace
/// does not depend on the thread count.
pub fn capture_states(net: &Network, params: &[f32], data: &LabeledDataset, keep_bits: bool) -> Result<ActivationTrace> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hidden = net.hidden_layers();
    let shapes = hidden.iter().map(|&l| (l, net.layer_units(l))).collect();
    let mut builder = TraceBuilder::new(data.labels(), data.classes(), shapes, keep_bits)?;
    let ranges: Vec<_> = data.chunks(CHUNK).collect();
    let group = rayon::current_num_threads().max(1);
    for batch in ranges.chunks(group) {
        let traces: Vec<Result<Vec<ndarray::Array2<f64>>>> = batch
            .par_iter()
            .map(|r| {
                let x = data.images().slice(ndarray::s![r.clone(), ..]);
                let (_, trace) = net.forward(params, x, true)?;
                Ok(trace.expect("capture requested").layers.into_iter().map(|t| t.psp.mapv(|z| z as f64)).collect())
            })
            .collect();
        for (r, t) in batch.iter().zip(traces) {
            let t = t?;
            builder.add(r.start, &data.labels()[r.clone()], t.iter().map(|a| a.view()).collect())?;
        }
    }
    Ok(builder.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, ParamVector, Shape};
    use crate::Split;
    use ndarray::array;

    #[test]
    fn zero_params_close_every_gate() {
        let net = Network::new(ModelConfig::mlp("z", 3, &[4, 2], 2)).unwrap();
        let p = ParamVector::<f32>::zeros(net.layout().clone());
        let x = ndarray::Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f32);
        let d = LabeledDataset::new(x, vec![0, 1, 0, 1, 1, 0], Shape::flat(3), Split::Train, 2).unwrap();
        let t = capture_states(&net, p.values(), &d, true).unwrap();
        assert_eq!(t.layers().len(), 2);
        assert!(t.layers().iter().all(|l| l.on.iter().all(|&n| n == 0) && l.z2.iter().all(|&s| s == 0.0)));
        assert_eq!(t.class_counts(), &[3, 3]);
    }

    #[test]
    fn single_neuron_counts() {
        let z = array![[1.0], [-1.0]];
        let t = ActivationTrace::from_psp(&[0, 0], 1, &[(0, z.view())], true).unwrap();
        assert_eq!(t.class_counts(), &[2]);
        assert_eq!(t.layers()[0].on, vec![1]);
        assert_eq!(t.layers()[0].z2, vec![2.0]);
    }

    #[test]
    fn empty_inputs_rejected() {
        let z = ndarray::Array2::<f64>::zeros((0, 2));
        assert!(matches!(
            ActivationTrace::from_psp(&[], 2, &[(0, z.view())], false),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn joint_counts_need_bits() {
        let z = array![[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        let t = ActivationTrace::from_psp(&[0, 0, 0], 1, &[(0, z.view())], false).unwrap();
        assert!(matches!(t.joint_on(&t.layers()[0], 0, 1, 0), Err(Error::GatesNotRetained)));
        let t = ActivationTrace::from_psp(&[0, 0, 0], 1, &[(0, z.view())], true).unwrap();
        assert_eq!(t.joint_on(&t.layers()[0], 0, 1, 0).unwrap(), (1, 2, 1));
    }

    #[test]
    fn chunked_capture_matches_per_sample_loop() {
        let net = Network::new(ModelConfig::mlp("c", 5, &[7, 3], 3)).unwrap();
        let p = net.init_params(4);
        let n = 2_345;
        let x = ndarray::Array2::from_shape_fn((n, 5), |(i, j)| ((i * 5 + j) as f32 * 0.173).sin());
        let y: Vec<u8> = (0..n).map(|i| ((i * 7) % 3) as u8).collect();
        let d = LabeledDataset::new(x, y, Shape::flat(5), Split::Train, 3).unwrap();
        let t = capture_states(&net, p.values(), &d, true).unwrap();
        let mut on = [vec![0u64; 7 * 3], vec![0u64; 3 * 3]];
        for s in 0..n {
            let (_, tr) = net.forward(p.values(), d.images().slice(ndarray::s![s..s + 1, ..]), true).unwrap();
            for (k, layer) in tr.unwrap().layers.iter().enumerate() {
                for (u, &z) in layer.psp.row(0).iter().enumerate() {
                    if z > 0.0 {
                        on[k][u * 3 + d.labels()[s] as usize] += 1;
                    }
                }
            }
        }
        assert_eq!(t.layers()[0].on, on[0]);
        assert_eq!(t.layers()[1].on, on[1]);
    }
}
