use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Provenance, PruneMask};
use crate::nn::{train, Network, ParamLayout, ParamVector, TrainConfig, TrainData, TrainRecord};

/// How the surviving parameters of a pruned network are initialized before retraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetrainStrategy {
    /// Reset survivors to their values at initialization.
    RewindToInit,
    /// Draw survivors afresh from the initialization distribution.
    RandomReinit { seed: u64 },
    /// Keep the trained survivors.
    FineTune,
}

/// Surviving coordinates take their value from `init`; pruned ones are zero.
pub fn rewind(mask: &PruneMask, init: &ParamVector<f32>) -> Result<ParamVector<f32>> {
    mask.check_len(init.len())?;
    let mut out = init.clone();
    mask.apply(out.values_mut());
    Ok(out)
}

/// Fresh Kaiming-uniform values under a new seed on the surviving support.
pub fn random_reinit(layout: &ParamLayout, mask: &PruneMask, seed: u64) -> Result<Vec<f32>> {
    mask.check_len(layout.len())?;
    let mut values = layout.kaiming_init(seed);
    mask.apply(&mut values);
    Ok(values)
}

/// A new mask with the same pruned count in every tensor as `reference`,
/// with positions drawn uniformly within each tensor.
pub fn random_structure(layout: &ParamLayout, reference: &PruneMask, seed: u64) -> Result<PruneMask> {
    reference.check_len(layout.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![true; layout.len()];
    for (slot, pruned) in layout.slots().iter().zip(reference.pruned_per_slot(layout)) {
        if pruned == 0 {
            continue;
        }
        for i in sample(&mut rng, slot.len(), pruned) {
            keep[slot.offset + i] = false;
        }
    }
    Ok(PruneMask::new(keep, Provenance::RandomStructure, Some(seed), reference.compression_rate()))
}

/// Starting point for retraining a pruned network under `strategy`.
pub fn retrain_start(
    net: &Network,
    strategy: RetrainStrategy,
    mask: &PruneMask,
    init_snapshot: Option<&ParamVector<f32>>,
    trained: Option<&ParamVector<f32>>,
) -> Result<ParamVector<f32>> {
    match strategy {
        RetrainStrategy::RewindToInit => {
            let init = init_snapshot
                .ok_or_else(|| Error::Config("rewinding needs the stored initial parameters".into()))?;
            rewind(mask, init)
        }
        RetrainStrategy::RandomReinit { seed } => {
            ParamVector::new(net.layout().clone(), random_reinit(net.layout(), mask, seed)?)
        }
        RetrainStrategy::FineTune => {
            let trained = trained
                .ok_or_else(|| Error::Config("fine-tuning needs the trained parameters".into()))?;
            rewind(mask, trained)
        }
    }
}

/// Retrains the sparse network defined by `mask` from the point chosen by `strategy`.
pub fn retrain(
    net: &Network,
    strategy: RetrainStrategy,
    mask: &PruneMask,
    init_snapshot: Option<&ParamVector<f32>>,
    trained: Option<&ParamVector<f32>>,
    data: TrainData<'_>,
    config: &TrainConfig,
) -> Result<TrainRecord> {
    let start = retrain_start(net, strategy, mask, init_snapshot, trained)?;
    train(net, &start, data, config, Some(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelConfig, TensorRole};
    use crate::pruning::one_shot_prune;

    fn net() -> Network {
        Network::new(ModelConfig::mlp("r", 20, &[30, 10], 4)).unwrap()
    }

    #[test]
    fn rewind_all_ones_is_verbatim() {
        let n = net();
        let init = n.init_params(1);
        assert_eq!(rewind(&PruneMask::ones(init.len()), &init).unwrap(), init);
    }

    #[test]
    fn rewind_single_survivor() {
        let n = net();
        let init = n.init_params(1);
        let mut keep = vec![false; init.len()];
        keep[17] = true;
        let r = rewind(&PruneMask::new(keep, Provenance::Oneshot, None, 0.0), &init).unwrap();
        for (i, v) in r.values().iter().enumerate() {
            if i == 17 {
                assert_eq!(v.to_bits(), init.values()[17].to_bits());
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn rewind_length_mismatch() {
        let init = net().init_params(1);
        assert!(rewind(&PruneMask::ones(3), &init).is_err());
    }

    #[test]
    fn reinit_seeds() {
        let n = net();
        let trained = n.init_params(9);
        let mask = one_shot_prune(&trained, 0.5).unwrap();
        let a = random_reinit(n.layout(), &mask, 3).unwrap();
        assert_eq!(a, random_reinit(n.layout(), &mask, 3).unwrap());
        let b = random_reinit(n.layout(), &mask, 4).unwrap();
        let differ = (0..a.len()).filter(|&i| mask.is_kept(i) && a[i] != b[i]).count();
        assert!(differ > 0);
        assert!((0..a.len()).all(|i| mask.is_kept(i) || (a[i] == 0.0 && b[i] == 0.0)));
    }

    #[test]
    fn reinit_variance_matches_kaiming() {
        // Monte-Carlo oracle: Var(U(-b, b)) = b²/3 = 2 / fan_in
        let n = Network::new(ModelConfig::mlp("v", 50, &[200], 2)).unwrap();
        let w = n.layout().slot_for(0, TensorRole::Weight).unwrap().clone();
        let mask = PruneMask::ones(n.num_params());
        let v = random_reinit(n.layout(), &mask, 77).unwrap();
        let xs = &v[w.range()];
        assert!(xs.len() >= 10_000);
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let target = 2.0 / w.fan_in as f64;
        assert!((var / target - 1.0).abs() < 0.2, "var {var} target {target}");
    }

    #[test]
    fn random_structure_conserves_counts() {
        let n = net();
        let layout = n.layout();
        assert_eq!(random_structure(layout, &PruneMask::ones(n.num_params()), 1).unwrap().pruned_count(), 0);
        let reference = one_shot_prune(&n.init_params(2), 0.7).unwrap();
        let r = random_structure(layout, &reference, 5).unwrap();
        assert_eq!(r.pruned_per_slot(layout), reference.pruned_per_slot(layout));
        assert_eq!(r.provenance, Provenance::RandomStructure);
        assert_ne!(r.keep(), reference.keep());
    }

    #[test]
    fn random_structure_overlap_is_binomial() {
        // One layer of n weights with k pruned: the overlap of pruned sets is
        // hypergeometric with mean k²/n; check within 3σ.
        let n = Network::new(ModelConfig::mlp("o", 100, &[], 100)).unwrap();
        let layout = n.layout();
        let w = layout.slot_for(0, TensorRole::Weight).unwrap().clone();
        let total = w.len() as f64;
        let mut keep = vec![true; layout.len()];
        let k = 3_000;
        keep[..k].iter_mut().for_each(|x| *x = false);
        let reference = PruneMask::new(keep, Provenance::Oneshot, None, 0.0);
        let r = random_structure(layout, &reference, 11).unwrap();
        let overlap = (0..w.len()).filter(|&i| !r.is_kept(i) && !reference.is_kept(i)).count() as f64;
        let p = k as f64 / total;
        let mean = k as f64 * p;
        let sd = (k as f64 * p * (1.0 - p)).sqrt();
        assert!((overlap - mean).abs() < 3.0 * sd, "overlap {overlap} mean {mean} sd {sd}");
    }

    #[test]
    fn retrain_start_requirements() {
        let n = net();
        let mask = PruneMask::ones(n.num_params());
        assert!(retrain_start(&n, RetrainStrategy::RewindToInit, &mask, None, None).is_err());
        assert!(retrain_start(&n, RetrainStrategy::FineTune, &mask, None, None).is_err());
        assert!(retrain_start(&n, RetrainStrategy::RandomReinit { seed: 1 }, &mask, None, None).is_ok());
    }
}
