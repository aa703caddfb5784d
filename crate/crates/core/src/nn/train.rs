use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::params::ParamVector;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep a copy of the parameters after this many optimizer steps.
    pub snapshot_step: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 42,
            snapshot_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`, then pruned coordinates are forced to zero.
#[derive(Clone, Debug)]
pub struct Sgd<F = f32> {
    lr: F,
    momentum: F,
    weight_decay: F,
    velocity: Vec<F>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(len: usize, config: &TrainConfig) -> Self {
        Sgd {
            lr: F::from_f64(config.learning_rate),
            momentum: F::from_f64(config.momentum),
            weight_decay: F::from_f64(config.weight_decay),
            velocity: vec![F::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F], mask: Option<&PruneMask>) {
        debug_assert_eq!(params.len(), grad.len());
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        let update = |p: &mut F, v: &mut F, g: F| {
            *v = mu * *v + (g + wd * *p);
            *p = *p - lr * *v;
        };
        match mask {
            None => {
                for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
                    update(p, v, g);
                }
            }
            Some(m) => {
                for (((p, v), &g), &keep) in
                    params.iter_mut().zip(&mut self.velocity).zip(grad).zip(m.keep())
                {
                    if keep {
                        update(p, v, g);
                    } else {
                        *p = F::zero();
                        *v = F::zero();
                    }
                }
            }
        }
    }
}

/// One SGD step from a zero velocity buffer.
pub fn sgd_step<F: Scalar>(
    params: &ParamVector<F>,
    grad: &ParamVector<F>,
    config: &TrainConfig,
    mask: Option<&PruneMask>,
) -> Result<ParamVector<F>> {
    if params.len() != grad.len() {
        return Err(Error::Layout("gradient and parameters differ in length".into()));
    }
    if let Some(m) = mask {
        m.check_len(params.len())?;
    }
    let mut out = params.clone();
    Sgd::new(params.len(), config).step(out.values_mut(), grad.values(), mask);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed at the end of this epoch.
    pub steps: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub initial: ParamVector<f32>,
    pub final_params: ParamVector<f32>,
    pub epochs: Vec<EpochMetrics>,
    pub snapshot: Option<(u64, ParamVector<f32>)>,
}

impl TrainRecord {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.epochs)
    }
}

pub fn metrics_csv(epochs: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,steps,train_loss,test_loss,test_accuracy\n");
    for e in epochs {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.steps, e.train_loss, e.test_loss, e.test_accuracy);
    }
    s
}

#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a LabeledDataset,
    pub test: &'a LabeledDataset,
}

/// Stateful single-threaded training loop shared by plain training and gradual pruning.
pub struct TrainSession<'a> {
    net: &'a Network,
    data: TrainData<'a>,
    config: TrainConfig,
    sgd: Sgd<f32>,
    params: Vec<f32>,
    grad: Vec<f32>,
    mask: Option<PruneMask>,
    step: u64,
    snapshot: Option<(u64, ParamVector<f32>)>,
}

impl<'a> TrainSession<'a> {
    pub fn new(
        net: &'a Network,
        data: TrainData<'a>,
        config: &TrainConfig,
        init: &ParamVector<f32>,
        mask: Option<PruneMask>,
    ) -> Result<Self> {
        config.validate()?;
        if !init.same_layout(net.layout()) {
            return Err(Error::Layout("initial parameters do not match the model".into()));
        }
        if let Some(m) = &mask {
            m.check_len(net.num_params())?;
        }
        if data.train.is_empty() || data.test.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = net.num_params();
        Ok(TrainSession {
            net,
            data,
            config: config.clone(),
            sgd: Sgd::new(n, config),
            params: init.values().to_vec(),
            grad: vec![0.0; n],
            mask,
            step: 0,
            snapshot: None,
        })
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn data(&self) -> TrainData<'a> {
        self.data
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn param_vector(&self) -> ParamVector<f32> {
        ParamVector::new(self.net.layout().clone(), self.params.clone()).expect("session layout")
    }

    pub fn mask(&self) -> Option<&PruneMask> {
        self.mask.as_ref()
    }

    /// Installs a new mask and zeroes the newly pruned coordinates immediately.
    pub fn set_mask(&mut self, mask: PruneMask) -> Result<()> {
        mask.check_len(self.params.len())?;
        mask.apply(&mut self.params);
        self.mask = Some(mask);
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn take_snapshot(&mut self) -> Option<(u64, ParamVector<f32>)> {
        self.snapshot.take()
    }

    /// Runs one epoch, calling `after_step` after every optimizer step.
    pub fn run_epoch(
        &mut self,
        epoch: usize,
        after_step: &mut dyn FnMut(&mut TrainSession<'a>) -> Result<()>,
    ) -> Result<EpochMetrics> {
        let batches = self.data.train.batches(self.config.batch_size, self.config.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        for idx in &batches {
            let (x, y) = self.data.train.gather(idx);
            let loss = self.net.loss_and_grad_into(&self.params, x.view(), &y, &mut self.grad)?;
            loss_sum += loss * idx.len() as f64;
            self.sgd.step(&mut self.params, &self.grad, self.mask.as_ref());
            self.step += 1;
            if self.config.snapshot_step == Some(self.step) {
                self.snapshot = Some((self.step, self.param_vector()));
            }
            after_step(self)?;
        }
        let test = self.net.evaluate(&self.params, self.data.test)?;
        Ok(EpochMetrics {
            epoch,
            steps: self.step,
            train_loss: loss_sum / self.data.train.len() as f64,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
        })
    }
}

/// Trains from `init` for `config.epochs` epochs. The initial parameters are
/// stored verbatim in the record so they can be rewound to later.
pub fn train(
    net: &Network,
    init: &ParamVector<f32>,
    data: TrainData<'_>,
    config: &TrainConfig,
    mask: Option<&PruneMask>,
) -> Result<TrainRecord> {
    let mut session = TrainSession::new(net, data, config, init, mask.cloned())?;
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        match session.run_epoch(epoch, &mut |_| Ok(())) {
            Ok(m) => epochs.push(m),
            Err(e) if e.is_numeric() => {
                let loss = match &e {
                    Error::NumericOverflow(_) => f64::NAN,
                    _ => f64::INFINITY,
                };
                let record = TrainRecord {
                    initial: init.clone(),
                    final_params: session.param_vector(),
                    epochs,
                    snapshot: session.take_snapshot(),
                };
                return Err(Error::Diverged { epoch, loss, record: Box::new(record) });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainRecord {
        initial: init.clone(),
        final_params: session.param_vector(),
        epochs,
        snapshot: session.take_snapshot(),
    })
}
