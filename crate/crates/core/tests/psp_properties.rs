use std::collections::HashMap;

use ndarray::Array2;
use proptest::prelude::*;
use sparsescape::psp::{first_order_entropy, second_order_entropy, ActivationTrace, PairSelection};

/// Random gate matrix with every class present; each neuron gets its own on-rate
/// so traces range from constant to fair gates.
fn instance(max_units: usize, max_samples: usize) -> impl Strategy<Value = (Vec<u8>, usize, Array2<bool>)> {
    (1usize..=4, 2usize..=max_units, 8usize..=max_samples).prop_flat_map(|(classes, units, samples)| {
        let rates = proptest::collection::vec(0u32..=4, units);
        let noise = proptest::collection::vec(0u32..4, units * samples);
        let labels = proptest::collection::vec(0u8..classes as u8, samples);
        (labels, rates, noise).prop_map(move |(mut labels, rates, noise)| {
            for c in 0..classes {
                labels[c] = c as u8;
            }
            let g = Array2::from_shape_fn((samples, units), |(s, u)| noise[s * units + u] < rates[u]);
            (labels, classes, g)
        })
    })
}

/// Entropy in bits straight from a histogram of observed states.
fn histogram_entropy<K: std::hash::Hash + Eq>(states: impl Iterator<Item = K>) -> f64 {
    let mut h: HashMap<K, usize> = HashMap::new();
    let mut n = 0usize;
    for s in states {
        *h.entry(s).or_default() += 1;
        n += 1;
    }
    h.values()
        .map(|&k| {
            let p = k as f64 / n as f64;
            -p * p.ln() / std::f64::consts::LN_2
        })
        .sum()
}

fn class_rows(labels: &[u8], c: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&s| labels[s] as usize == c).collect()
}

fn trace_of(labels: &[u8], classes: usize, g: &Array2<bool>) -> ActivationTrace {
    ActivationTrace::from_gates(labels, classes, &[(0, g.view())]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn entropies_equal_histogram_brute_force((labels, classes, g) in instance(32, 256)) {
        let t = trace_of(&labels, classes, &g);
        let r1 = first_order_entropy(&t).unwrap();
        let r2 = second_order_entropy(&t, &PairSelection::Exhaustive).unwrap();
        let units = g.ncols();
        for u in 0..units {
            for c in 0..classes {
                let rows = class_rows(&labels, c);
                let want = histogram_entropy(rows.iter().map(|&s| g[[s, u]]));
                prop_assert!((r1.units[u].per_class[c] - want).abs() < 1e-12);
            }
        }
        for pe in &r2.units {
            let (a, b) = (pe.neuron, pe.neuron_b.unwrap());
            for c in 0..classes {
                let rows = class_rows(&labels, c);
                let want = histogram_entropy(rows.iter().map(|&s| (g[[s, a]], g[[s, b]])));
                prop_assert!((pe.per_class[c] - want).abs() < 1e-12);
            }
        }
        prop_assert_eq!(r2.units.len(), units * (units - 1) / 2);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn entropy_invariants((labels, classes, g) in instance(12, 96), perm_seed in any::<u64>()) {
        let t = trace_of(&labels, classes, &g);
        let r1 = first_order_entropy(&t).unwrap();
        let r2 = second_order_entropy(&t, &PairSelection::Exhaustive).unwrap();
        let cf = classes as f64;
        for u in &r1.units {
            for &h in &u.per_class {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
            }
            prop_assert!(u.total >= 0.0 && u.total <= cf + 1e-12);
        }
        for p in &r2.units {
            let (a, b) = (&r1.units[p.neuron], &r1.units[p.neuron_b.unwrap()]);
            for c in 0..classes {
                let h = p.per_class[c];
                prop_assert!((0.0..=2.0 + 1e-12).contains(&h));
                prop_assert!(h <= a.per_class[c] + b.per_class[c] + 1e-12);
                prop_assert!(h + 1e-12 >= a.per_class[c].max(b.per_class[c]));
            }
            prop_assert!(p.total <= 2.0 * cf + 1e-12);
        }

        // relabeling samples (any permutation keeps each class's multiset of gates)
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = perm_seed | 1;
        for i in (1..n).rev() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            order.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let pl: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
        let pg = Array2::from_shape_fn(g.dim(), |(r, u)| g[[order[r], u]]);
        let pt = trace_of(&pl, classes, &pg);
        prop_assert_eq!(first_order_entropy(&pt).unwrap(), r1);
        prop_assert_eq!(second_order_entropy(&pt, &PairSelection::Exhaustive).unwrap(), r2);
    }
}
