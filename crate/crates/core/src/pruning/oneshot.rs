use crate::error::{Error, Result};
use crate::mask::{Provenance, PruneMask};
use crate::nn::ParamVector;

/// Prunes `⌊fraction · N⌋` of the `N` prunable weights with the smallest
/// magnitude, ranked globally across layers. Biases are never pruned.
/// Equal magnitudes are pruned in ascending flat-index order.
pub fn one_shot_prune(trained: &ParamVector<f32>, fraction: f64) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("prune fraction must lie in [0, 1), got {fraction}")));
    }
    let prunable = trained.layout().prunable_count();
    let count = (fraction * prunable as f64).floor() as usize;
    let mut mask = one_shot_prune_count(trained, count)?;
    mask.parameter = fraction;
    Ok(mask)
}

/// Prunes exactly `count` weights by magnitude; used to match another mask's sparsity.
pub fn one_shot_prune_count(trained: &ParamVector<f32>, count: usize) -> Result<PruneMask> {
    let flags = trained.layout().prunable_flags();
    let values = trained.values();
    let mut candidates: Vec<usize> = (0..values.len()).filter(|&i| flags[i]).collect();
    if count > candidates.len() {
        return Err(Error::Config(format!(
            "cannot prune {count} of {} prunable weights",
            candidates.len()
        )));
    }
    // stable sort keeps ascending index order among equal magnitudes
    candidates.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()));
    let mut keep = vec![true; values.len()];
    for &i in &candidates[..count] {
        keep[i] = false;
    }
    let fraction = if candidates.is_empty() { 0.0 } else { count as f64 / candidates.len() as f64 };
    Ok(PruneMask::new(keep, Provenance::Oneshot, None, fraction))
}
