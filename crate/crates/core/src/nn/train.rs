use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::minmax_scale;
use crate::nn::network::{Network, Params};
use crate::nn::optim::{PlateauSchedule, RmsProp};
use crate::rng::{stream, Purpose};

/// Source of the batch-norm statistics used at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnStats {
    /// Exponential running averages of the training batch statistics.
    Running,
    /// After each epoch, exact statistics of the un-augmented training inputs.
    Clean,
    /// After each epoch, exact statistics of one freshly augmented copy of
    /// the training inputs.
    Augmented,
    /// After each epoch, exact statistics over the un-augmented inputs
    /// together with one augmented copy.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    pub augment_sigma: f64,
    /// Min-max rescale each augmented input, so training sees the same
    /// [0, 1] domain that prediction does.
    pub augment_rescale: bool,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    /// Stop once validation loss has not improved for this many epochs.
    pub early_stop_patience: Option<usize>,
    /// Where the batch-norm inference statistics come from.
    pub bn_stats: BnStats,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-3,
            plateau_patience: 10,
            plateau_factor: 0.1,
            epochs: 100,
            seed: 0,
            augment_sigma: 0.5,
            augment_rescale: true,
            rmsprop_decay: 0.9,
            rmsprop_eps: 1e-8,
            early_stop_patience: None,
            bn_stats: BnStats::Mixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.plateau_patience == 0 {
            return Err(Error::Config(
                "batch_size, epochs and plateau_patience must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.rmsprop_eps > 0.0) {
            return Err(Error::Config("lr and rmsprop_eps must be > 0".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1)".into()));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::Config("rmsprop_decay must be in (0, 1)".into()));
        }
        if !(self.augment_sigma >= 0.0) {
            return Err(Error::Config("augment_sigma must be >= 0".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        Ok(())
    }
}

fn augment(x: &[f64], cfg: &TrainConfig, noise: &Normal<f64>, rng: &mut impl Rng) -> Vec<f64> {
    if cfg.augment_sigma <= 0.0 {
        return x.to_vec();
    }
    let noisy: Vec<f64> = x.iter().map(|v| v + noise.sample(rng)).collect();
    if cfg.augment_rescale {
        minmax_scale(&noisy)
    } else {
        noisy
    }
}

/// Learning rate after feeding a validation-loss history to the plateau
/// schedule, starting from `cfg.lr`.
pub fn plateau_lr(history: &[f64], cfg: &TrainConfig) -> f64 {
    let mut sched = PlateauSchedule::new(cfg.plateau_patience, cfg.plateau_factor);
    history.iter().fold(cfg.lr, |lr, &l| sched.observe(l, lr))
}

/// Inputs and dense targets, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

impl<'a> Samples<'a> {
    pub fn new(inputs: &'a [Vec<f64>], targets: &'a [Vec<f64>]) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::LengthMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    /// Wall time per epoch; kept apart from the curve so curves stay
    /// reproducible.
    pub epoch_seconds: Vec<f64>,
    /// Optimizer state after the last epoch run.
    pub optimizer: RmsProp,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse,lr\n");
        for r in &self.curve {
            s.push_str(&format!(
                "{},{:.10e},{:.10e},{:e}\n",
                r.epoch, r.train_mse, r.val_mse, r.lr
            ));
        }
        s
    }
}

/// Inference-mode MSE over a sample set, evaluated in chunks.
pub fn evaluate_mse(net: &Network, data: Samples<'_>, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (xs, ys) in data
        .inputs
        .chunks(chunk.max(1))
        .zip(data.targets.chunks(chunk.max(1)))
    {
        let views: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let out = net.predict_batch(&views)?;
        for (o, y) in out.iter().zip(ys) {
            if o.len() != y.len() {
                return Err(Error::LengthMismatch {
                    expected: o.len(),
                    got: y.len(),
                });
            }
            total += o.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += o.len();
        }
    }
    Ok(total / count as f64)
}

/// Trains in place. Each epoch shuffles the training set, adds fresh
/// Gaussian noise to the inputs, and runs one RMSprop step per mini-batch.
/// The parameters with the lowest validation loss are restored at the end.
pub fn fit_model(
    net: &mut Network,
    train: Samples<'_>,
    val: Samples<'_>,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut opt = RmsProp::new(&net.params, cfg.lr);
    opt.rho = cfg.rmsprop_decay;
    opt.eps = cfg.rmsprop_eps;
    let mut sched = PlateauSchedule::new(cfg.plateau_patience, cfg.plateau_factor);
    let noise = Normal::new(0.0, cfg.augment_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        curve: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_mse: f64::INFINITY,
        epoch_seconds: Vec::with_capacity(cfg.epochs),
        optimizer: RmsProp::new(&net.params, cfg.lr),
    };
    let mut best: Option<Params> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = stream(cfg.seed, Purpose::Shuffle, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut aug_rng = stream(cfg.seed, Purpose::Augment, epoch as u64);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| augment(&train.inputs[i], cfg, &noise, &mut aug_rng))
                .collect();
            let views: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            let ts: Vec<&[f64]> = batch.iter().map(|&i| train.targets[i].as_slice()).collect();
            let (loss, grads, pass) = net.loss_and_grad(&views, &ts)?;
            if let Some((mean, var)) = pass.batch_stats() {
                let (mean, var) = (mean.to_vec(), var.to_vec());
                net.params.bn.update_running(&mean, &var);
            }
            opt.step(&mut net.params, &grads)?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_mse = loss_sum / train.len() as f64;
        match cfg.bn_stats {
            BnStats::Running => {}
            BnStats::Clean => {
                let views: Vec<&[f64]> = train.inputs.iter().map(Vec::as_slice).collect();
                net.calibrate_bn(&views)?;
            }
            BnStats::Augmented | BnStats::Mixed => {
                let mut rng = stream(cfg.seed, Purpose::Calibrate, epoch as u64);
                let xs: Vec<Vec<f64>> = train
                    .inputs
                    .iter()
                    .map(|x| augment(x, cfg, &noise, &mut rng))
                    .collect();
                let mut views: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                if cfg.bn_stats == BnStats::Mixed {
                    views.extend(train.inputs.iter().map(Vec::as_slice));
                }
                net.calibrate_bn(&views)?;
            }
        }
        let val_mse = evaluate_mse(net, val, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: epoch + 1,
            train_mse,
            val_mse,
            lr: opt.lr,
        };
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }
        report.curve.push(record);
        report.epoch_seconds.push(started.elapsed().as_secs_f64());

        if val_mse < report.best_val_mse {
            report.best_val_mse = val_mse;
            report.best_epoch = epoch + 1;
            best = Some(net.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        opt.lr = sched.observe(val_mse, opt.lr);
        if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    if let Some(p) = best {
        net.params = p;
    }
    report.optimizer = opt;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_examples() {
        let cfg = TrainConfig::default();
        let falling: Vec<f64> = (0..30).map(|k| 1.0 / (k + 1) as f64).collect();
        assert_eq!(plateau_lr(&falling, &cfg), 1e-3);
        assert!((plateau_lr(&[1.0; 11], &cfg) - 1e-4).abs() < 1e-18);
        assert_eq!(plateau_lr(&[1.0; 10], &cfg), 1e-3);
        assert!((plateau_lr(&[1.0; 21], &cfg) - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            plateau_factor: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
