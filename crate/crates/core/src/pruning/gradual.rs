//! Prune-while-training loop.
//!
//! At every prune event each surviving weight gets a score (by default the
//! sensitivity `|θ_j · ∂L/∂θ_j|` averaged over a few mini-batches) and the
//! lowest-scoring fraction of the survivors is masked for good. Events are
//! suspended while test accuracy sits more than `tolerance` below the dense
//! baseline; if it stays there longer than `patience_epochs` pruning halts.
//! A fine-tune tail with the final mask follows.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mask::{Provenance, PruneMask};
use crate::nn::{EpochMetrics, Network, ParamVector, TrainConfig, TrainData, TrainSession};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `|θ · ∂L/∂θ|`
    Sensitivity,
    /// `|θ|`
    Magnitude,
    /// `|∂L/∂θ|`
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradualSchedule {
    /// Dense epochs before the first event; the baseline is measured after them.
    pub warmup_epochs: usize,
    /// Optimizer steps between prune events.
    pub interval_steps: u64,
    /// Fraction of the surviving weights removed per event (geometric decay of density).
    pub prune_fraction: f64,
    /// Maximum weight compression.
    pub target: f64,
    /// Allowed test-accuracy drop below the dense baseline before events pause.
    pub tolerance: f64,
    pub patience_epochs: usize,
    pub finetune_epochs: usize,
    pub score: ScoreKind,
    /// Mini-batches averaged when scoring.
    pub score_batches: usize,
}

impl Default for GradualSchedule {
    fn default() -> Self {
        GradualSchedule {
            warmup_epochs: 0,
            interval_steps: 600,
            prune_fraction: 0.1,
            target: 0.98,
            tolerance: 0.01,
            patience_epochs: 3,
            finetune_epochs: 10,
            score: ScoreKind::Sensitivity,
            score_batches: 10,
        }
    }
}

impl GradualSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.interval_steps == 0 {
            return Err(Error::Config("interval_steps must be at least 1".into()));
        }
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::Config(format!("target must lie in (0, 1), got {}", self.target)));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::Config("prune_fraction must lie in (0, 1)".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        if self.score_batches == 0 {
            return Err(Error::Config("score_batches must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    TargetReached,
    AccuracyPlateau,
    EpochBudget,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub epoch: usize,
    pub compression_weights: f64,
    pub compression_all: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct GradualOutcome {
    pub params: ParamVector<f32>,
    pub mask: PruneMask,
    pub trajectory: Vec<TrajectoryPoint>,
    pub epochs: Vec<EpochMetrics>,
    pub baseline_accuracy: f64,
    pub events: usize,
    pub halt: HaltReason,
}

impl GradualOutcome {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    pub fn trajectory_csv(&self) -> String {
        trajectory_csv(&self.trajectory)
    }
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("step,compression_weights,compression_all,train_loss,test_acc\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.step, p.compression_weights, p.compression_all, p.train_loss, p.test_accuracy
        );
    }
    s
}

/// Per-parameter prune scores averaged over the given mini-batches.
pub fn prune_scores(
    net: &Network,
    params: &[f32],
    data: &LabeledDataset,
    batches: &[Vec<usize>],
    kind: ScoreKind,
) -> Result<Vec<f64>> {
    let n = params.len();
    if kind == ScoreKind::Magnitude {
        return Ok(params.iter().map(|p| p.abs() as f64).collect());
    }
    if batches.is_empty() {
        return Err(Error::Config("scoring needs at least one batch".into()));
    }
    let mut mean_grad = vec![0.0f64; n];
    let mut grad = vec![0.0f32; n];
    for idx in batches {
        let (x, y) = data.gather(idx);
        net.loss_and_grad_into(params, x.view(), &y, &mut grad)?;
        for (m, &g) in mean_grad.iter_mut().zip(&grad) {
            *m += g as f64;
        }
    }
    let inv = 1.0 / batches.len() as f64;
    Ok(match kind {
        ScoreKind::Sensitivity => {
            mean_grad.iter().zip(params).map(|(g, &p)| (g * inv * p as f64).abs()).collect()
        }
        _ => mean_grad.iter().map(|g| (g * inv).abs()).collect(),
    })
}

struct PruneState {
    rng: ChaCha8Rng,
    prunable: Vec<bool>,
    /// Highest number of pruned weights allowed by the target.
    max_pruned: usize,
    paused: bool,
    stopped: bool,
    events: usize,
    error: Option<Error>,
}

fn prune_event(session: &mut TrainSession<'_>, schedule: &GradualSchedule, st: &mut PruneState) -> Result<()> {
    let net = session.network();
    let data = session.data().train;
    let mask = session.mask().expect("gradual session always carries a mask").clone();
    let survivors: Vec<usize> =
        (0..mask.len()).filter(|&i| st.prunable[i] && mask.is_kept(i)).collect();
    let already = st.prunable.iter().filter(|&&p| p).count() - survivors.len();
    let room = st.max_pruned.saturating_sub(already);
    let count = ((schedule.prune_fraction * survivors.len() as f64).ceil() as usize).min(room);
    if count == 0 {
        st.stopped = true;
        return Ok(());
    }
    let batch = session.config().batch_size.min(data.len());
    let batches: Vec<Vec<usize>> = (0..schedule.score_batches)
        .map(|_| sample(&mut st.rng, data.len(), batch).into_vec())
        .collect();
    let scores = prune_scores(net, session.params(), data, &batches, schedule.score)?;
    let mut order = survivors;
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let threshold = scores[order[count - 1]];
    let mut keep = mask.keep().to_vec();
    for &i in &order[..count] {
        keep[i] = false;
    }
    session.set_mask(PruneMask::new(keep, Provenance::Gradual, Some(session.config().seed), threshold))?;
    st.events += 1;
    if already + count >= st.max_pruned {
        st.stopped = true;
    }
    Ok(())
}

/// Interleaves training with prune events; see the module docs for the schedule.
///
/// The run is `warmup_epochs` dense epochs, at most `config.epochs` pruning
/// epochs, then `finetune_epochs` with the final mask. Epoch indices (and so
/// batch orders) run consecutively across the three phases.
pub fn gradual_prune(
    net: &Network,
    init: &ParamVector<f32>,
    data: TrainData<'_>,
    config: &TrainConfig,
    schedule: &GradualSchedule,
) -> Result<GradualOutcome> {
    schedule.validate()?;
    let layout = net.layout().clone();
    let mut session = TrainSession::new(
        net,
        data,
        config,
        init,
        Some(PruneMask::new(vec![true; net.num_params()], Provenance::Gradual, Some(config.seed), 0.0)),
    )?;
    let chance = 1.0 / net.classes().max(1) as f64;
    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut trajectory = Vec::new();
    let point = |m: &EpochMetrics, mask: &PruneMask| TrajectoryPoint {
        step: m.steps,
        epoch: m.epoch,
        compression_weights: mask.weight_compression(&layout),
        compression_all: mask.compression_rate(),
        train_loss: m.train_loss,
        test_accuracy: m.test_accuracy,
    };

    let mut epoch = 0;
    for _ in 0..schedule.warmup_epochs {
        let m = session.run_epoch(epoch, &mut |_| Ok(()))?;
        trajectory.push(point(&m, session.mask().expect("mask")));
        epochs.push(m);
        epoch += 1;
    }
    let baseline = match epochs.last() {
        Some(m) => m.test_accuracy,
        None => net.evaluate(init.values(), data.test)?.accuracy,
    };

    let prunable = layout.prunable_flags();
    let n_prunable = layout.prunable_count();
    let mut st = PruneState {
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_5C0E),
        max_pruned: (schedule.target * n_prunable as f64).floor() as usize,
        prunable,
        paused: false,
        stopped: false,
        events: 0,
        error: None,
    };
    let mut bad_epochs = 0;
    let mut halt = HaltReason::EpochBudget;
    for _ in 0..config.epochs {
        let m = {
            let st = &mut st;
            let mut hook = |s: &mut TrainSession<'_>| -> Result<()> {
                if st.paused || st.stopped || !s.steps().is_multiple_of(schedule.interval_steps) {
                    return Ok(());
                }
                prune_event(s, schedule, st).inspect_err(|_| st.stopped = true)
            };
            session.run_epoch(epoch, &mut hook)
        };
        let m = match m {
            Ok(m) => m,
            Err(e) => {
                st.error = Some(e);
                break;
            }
        };
        epoch += 1;
        let mask = session.mask().expect("mask");
        trajectory.push(point(&m, mask));
        epochs.push(m);
        if m.test_accuracy <= chance * 1.5 && mask.pruned_count() > 0 {
            let partial = GradualOutcome {
                params: session.param_vector(),
                mask: mask.clone(),
                trajectory,
                epochs,
                baseline_accuracy: baseline,
                events: st.events,
                halt: HaltReason::AccuracyPlateau,
            };
            return Err(Error::PruningCollapsed { step: m.steps, partial: Box::new(partial) });
        }
        if m.test_accuracy < baseline - schedule.tolerance {
            st.paused = true;
            bad_epochs += 1;
            if bad_epochs > schedule.patience_epochs {
                halt = HaltReason::AccuracyPlateau;
                break;
            }
        } else {
            st.paused = false;
            bad_epochs = 0;
        }
        if st.stopped {
            halt = HaltReason::TargetReached;
            break;
        }
    }
    if let Some(e) = st.error {
        return Err(e);
    }

    for _ in 0..schedule.finetune_epochs {
        let m = session.run_epoch(epoch, &mut |_| Ok(()))?;
        trajectory.push(point(&m, session.mask().expect("mask")));
        epochs.push(m);
        epoch += 1;
    }

    Ok(GradualOutcome {
        params: session.param_vector(),
        mask: session.mask().expect("mask").clone(),
        trajectory,
        epochs,
        baseline_accuracy: baseline,
        events: st.events,
        halt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{train, ModelConfig, Shape};
    use crate::Split;

    fn toy_data(n: usize, offset: f32) -> LabeledDataset {
        let x = ndarray::Array2::from_shape_fn((n, 4), |(i, j)| {
            ((i as f32 + offset) * 0.61 + j as f32 * 1.7).sin() * 1.5
        });
        let y = (0..n).map(|i| ((x[[i, 0]] + 0.5 * x[[i, 1]] - x[[i, 3]]) > 0.0) as u8).collect();
        LabeledDataset::new(x, y, Shape::flat(4), Split::Train, 2).unwrap()
    }

    fn setup() -> (Network, LabeledDataset, LabeledDataset) {
        (Network::new(ModelConfig::mlp("g", 4, &[32, 16], 2)).unwrap(), toy_data(256, 0.0), toy_data(128, 1000.0))
    }

    #[test]
    fn zero_events_equals_plain_training() {
        let (net, tr, te) = setup();
        let data = TrainData { train: &tr, test: &te };
        let cfg = TrainConfig { epochs: 4, batch_size: 16, learning_rate: 0.05, ..TrainConfig::default() };
        let schedule = GradualSchedule { interval_steps: 1_000_000, finetune_epochs: 0, ..GradualSchedule::default() };
        let init = net.init_params(8);
        let g = gradual_prune(&net, &init, data, &cfg, &schedule).unwrap();
        let plain = train(&net, &init, data, &cfg, None).unwrap();
        assert_eq!(g.events, 0);
        assert_eq!(g.params, plain.final_params);
        assert_eq!(g.epochs, plain.epochs);
    }

    #[test]
    fn sensitivity_scores_match_hand_products() {
        let (net, tr, _) = setup();
        let p = net.init_params(3);
        let batches = vec![vec![0, 1, 2, 3], vec![10, 11, 12]];
        let scores = prune_scores(&net, p.values(), &tr, &batches, ScoreKind::Sensitivity).unwrap();
        // hand oracle: average the two batch gradients, multiply by θ
        let mut g = vec![0.0f64; p.len()];
        for b in &batches {
            let (x, y) = tr.gather(b);
            let (_, gb) = net.loss_and_grad(&p, x.view(), &y).unwrap();
            for (a, v) in g.iter_mut().zip(gb.values()) {
                *a += *v as f64 / 2.0;
            }
        }
        for j in 0..p.len() {
            let want = (p.values()[j] as f64 * g[j]).abs();
            assert!((scores[j] - want).abs() <= 1e-12 * want.max(1.0), "j={j}");
        }
        let mag = prune_scores(&net, p.values(), &tr, &[], ScoreKind::Magnitude).unwrap();
        assert_eq!(mag[5], p.values()[5].abs() as f64);
    }

    #[test]
    fn masks_are_monotone_and_trajectory_non_decreasing() {
        let (net, tr, te) = setup();
        let data = TrainData { train: &tr, test: &te };
        let cfg = TrainConfig { epochs: 12, batch_size: 16, learning_rate: 0.05, ..TrainConfig::default() };
        let pre = train(&net, &net.init_params(1), data, &TrainConfig { epochs: 6, ..cfg.clone() }, None).unwrap();
        let schedule = GradualSchedule {
            interval_steps: 8,
            prune_fraction: 0.2,
            target: 0.8,
            tolerance: 0.5,
            finetune_epochs: 2,
            score_batches: 2,
            ..GradualSchedule::default()
        };
        let g = gradual_prune(&net, &pre.final_params, data, &cfg, &schedule).unwrap();
        assert!(g.events > 0);
        let c: Vec<f64> = g.trajectory.iter().map(|p| p.compression_weights).collect();
        assert!(c.windows(2).all(|w| w[0] <= w[1]), "{c:?}");
        assert!(*c.last().unwrap() <= 0.8 + 1e-12);
        assert!(g.params.values().iter().zip(g.mask.keep()).all(|(v, &k)| k || *v == 0.0));
        let biases_kept = net
            .layout()
            .slots()
            .iter()
            .filter(|s| !s.prunable())
            .all(|s| g.mask.keep()[s.range()].iter().all(|&k| k));
        assert!(biases_kept);
    }

    #[test]
    fn invalid_schedules() {
        let (net, tr, te) = setup();
        let data = TrainData { train: &tr, test: &te };
        let init = net.init_params(1);
        let cfg = TrainConfig { epochs: 1, batch_size: 16, ..TrainConfig::default() };
        for s in [
            GradualSchedule { interval_steps: 0, ..GradualSchedule::default() },
            GradualSchedule { target: 1.0, ..GradualSchedule::default() },
            GradualSchedule { target: 0.0, ..GradualSchedule::default() },
        ] {
            assert!(matches!(gradual_prune(&net, &init, data, &cfg, &s), Err(Error::Config(_))));
        }
    }
}
