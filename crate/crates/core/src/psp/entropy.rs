use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::trace::{ActivationTrace, LayerGates};
use crate::error::{Error, Result};

/// `−Σ p log₂ p` over the given counts with total `n`; `0 · log 0 = 0`.
pub fn entropy_bits(counts: &[u64], n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    counts
        .iter()
        .filter(|&&k| k > 0)
        .fold(0.0, |acc, &k| {
            let p = k as f64 / nf;
            acc - p * p.log2()
        })
}

/// A hidden unit addressed by network layer and index within that layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub layer: usize,
    pub neuron: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairSelection {
    /// Every within-layer pair.
    Exhaustive,
    /// `per_layer` distinct pairs per layer drawn uniformly without replacement
    /// (all pairs when a layer has fewer).
    Sampled { per_layer: usize, seed: u64 },
    Explicit { pairs: Vec<(UnitId, UnitId)> },
}

impl Default for PairSelection {
    fn default() -> Self {
        PairSelection::Sampled { per_layer: 10_000, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
    PerLayer,
}

/// Entropy of one neuron (first order) or one within-layer pair (second order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitEntropy {
    pub layer: usize,
    pub neuron: usize,
    pub neuron_b: Option<usize>,
    /// `H(·|c)` in bits for every class.
    pub per_class: Vec<f64>,
    /// `Σ_c H(·|c)`.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub order: u8,
    pub classes: usize,
    pub units: Vec<UnitEntropy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropySummary {
    pub order: u8,
    pub aggregation: Aggregation,
    pub units: usize,
    pub network: f64,
    pub per_layer: Vec<LayerValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerValue {
    pub layer: usize,
    pub value: f64,
}

impl EntropyReport {
    /// Mean (or sum) of class-summed totals per layer, in layer order.
    pub fn per_layer(&self, aggregation: Aggregation) -> Vec<LayerValue> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for u in &self.units {
            match out.last_mut() {
                Some((l, s, n)) if *l == u.layer => {
                    *s += u.total;
                    *n += 1;
                }
                _ => out.push((u.layer, u.total, 1)),
            }
        }
        out.into_iter()
            .map(|(layer, s, n)| LayerValue {
                layer,
                value: if aggregation == Aggregation::Sum { s } else { s / n as f64 },
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        if self.units.is_empty() {
            return 0.0;
        }
        self.sum() / self.units.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.units.iter().map(|u| u.total).sum()
    }

    /// The network-level scalar. `PerLayer` reports the mean for the scalar and
    /// keeps the per-layer means in the summary.
    pub fn aggregate(&self, aggregation: Aggregation) -> f64 {
        match aggregation {
            Aggregation::Sum => self.sum(),
            Aggregation::Mean | Aggregation::PerLayer => self.mean(),
        }
    }

    pub fn summary(&self, aggregation: Aggregation) -> EntropySummary {
        EntropySummary {
            order: self.order,
            aggregation,
            units: self.units.len(),
            network: self.aggregate(aggregation),
            per_layer: self.per_layer(aggregation),
        }
    }

    /// One row per unit and class, then a `total` row per unit.
    pub fn to_csv(&self) -> String {
        let pair = self.order == 2;
        let mut s = String::from(if pair { "layer,neuron,neuron_b,class,H\n" } else { "layer,neuron,class,H\n" });
        for u in &self.units {
            let head = match u.neuron_b {
                Some(b) if pair => format!("{},{},{}", u.layer, u.neuron, b),
                _ => format!("{},{}", u.layer, u.neuron),
            };
            for (c, h) in u.per_class.iter().enumerate() {
                let _ = writeln!(s, "{head},{c},{h}");
            }
            let _ = writeln!(s, "{head},total,{}", u.total);
        }
        s
    }
}

fn check_classes(trace: &ActivationTrace) -> Result<()> {
    match trace.class_counts().iter().position(|&n| n == 0) {
        Some(c) => Err(Error::MissingClass(c)),
        None => Ok(()),
    }
}

/// `H(z|c)` for every hidden unit and class.
pub fn first_order_entropy(trace: &ActivationTrace) -> Result<EntropyReport> {
    check_classes(trace)?;
    let classes = trace.classes();
    let counts = trace.class_counts();
    let mut units = Vec::with_capacity(trace.total_units());
    for lg in trace.layers() {
        for u in 0..lg.units {
            let per_class: Vec<f64> = (0..classes)
                .map(|c| {
                    let on = lg.on_count(u, c, classes);
                    entropy_bits(&[on, counts[c] - on], counts[c])
                })
                .collect();
            let total = per_class.iter().sum();
            units.push(UnitEntropy { layer: lg.layer, neuron: u, neuron_b: None, per_class, total });
        }
    }
    Ok(EntropyReport { order: 1, classes, units })
}

/// Decodes the `k`-th pair `(i, j)`, `i < j`, in row-major order over `n` units.
fn pair_from_index(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

fn select_pairs(trace: &ActivationTrace, selection: &PairSelection) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    match selection {
        PairSelection::Explicit { pairs } => {
            for (a, b) in pairs {
                if a.layer != b.layer {
                    return Err(Error::CrossLayerPair(a.layer, b.layer));
                }
                let li = trace
                    .layers()
                    .iter()
                    .position(|l| l.layer == a.layer)
                    .ok_or_else(|| Error::Config(format!("layer {} is not a hidden ReLU layer", a.layer)))?;
                let units = trace.layers()[li].units;
                if a.neuron >= units || b.neuron >= units || a.neuron == b.neuron {
                    return Err(Error::Config(format!(
                        "pair ({}, {}) is invalid in layer {} with {units} units",
                        a.neuron, b.neuron, a.layer
                    )));
                }
                out.push((li, a.neuron, b.neuron));
            }
        }
        PairSelection::Exhaustive => {
            for (li, lg) in trace.layers().iter().enumerate() {
                for i in 0..lg.units {
                    for j in i + 1..lg.units {
                        out.push((li, i, j));
                    }
                }
            }
        }
        PairSelection::Sampled { per_layer, seed } => {
            for (li, lg) in trace.layers().iter().enumerate() {
                let n = lg.units;
                let total = n * n.saturating_sub(1) / 2;
                if total <= *per_layer {
                    for i in 0..n {
                        for j in i + 1..n {
                            out.push((li, i, j));
                        }
                    }
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(lg.layer as u64);
                let mut picks = sample(&mut rng, total, *per_layer).into_vec();
                picks.sort_unstable();
                out.extend(picks.into_iter().map(|k| {
                    let (i, j) = pair_from_index(k, n);
                    (li, i, j)
                }));
            }
        }
    }
    Ok(out)
}

fn pair_entropy(trace: &ActivationTrace, lg: &LayerGates, a: usize, b: usize) -> Result<UnitEntropy> {
    let counts = trace.class_counts();
    let per_class = (0..trace.classes())
        .map(|c| {
            let (n11, na, nb) = trace.joint_on(lg, a, b, c)?;
            let n = counts[c];
            Ok(entropy_bits(&[n11, na - n11, nb - n11, n + n11 - na - nb], n))
        })
        .collect::<Result<Vec<f64>>>()?;
    let total = per_class.iter().sum();
    Ok(UnitEntropy { layer: lg.layer, neuron: a, neuron_b: Some(b), per_class, total })
}

/// `H(z_i, z_j | c)` for the selected within-layer pairs.
pub fn second_order_entropy(trace: &ActivationTrace, selection: &PairSelection) -> Result<EntropyReport> {
    check_classes(trace)?;
    if !trace.has_bits() {
        return Err(Error::GatesNotRetained);
    }
    let pairs = select_pairs(trace, selection)?;
    let units = pairs
        .par_iter()
        .map(|&(li, a, b)| pair_entropy(trace, &trace.layers()[li], a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(EntropyReport { order: 2, classes: trace.classes(), units })
}
