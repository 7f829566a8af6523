//! Mini-batch training with early stopping, evaluation and the naive
//! baseline.

use jtft_core::model::Jtft;
use jtft_core::tensor::{AdamConfig, AdamState};
use jtft_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_windows, Splits, Standardizer, Windows};
use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Spacing of training window origins.
    pub window_stride: usize,
    /// Spacing of validation and test window origins.
    pub eval_stride: usize,
    /// Report metrics on the raw data scale instead of the standardized one.
    pub raw_scale_metrics: bool,
    /// Filled from the experiment seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-4,
            patience: 3,
            window_stride: 1,
            eval_stride: 1,
            raw_scale_metrics: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> AppResult<()> {
        if self.batch_size == 0 || self.window_stride == 0 || self.eval_stride == 0 {
            return Err(AppError::Config("batch_size, window_stride and eval_stride must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AppError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_val_mse: Option<f64>,
    pub stopped_early: bool,
}

/// Shared accumulation so that metrics do not depend on batching.
#[derive(Default)]
struct MetricSums {
    sq: f64,
    abs: f64,
    count: usize,
    windows: usize,
}

impl MetricSums {
    fn add(&mut self, pred: &[f64], target: &[f64]) {
        for (p, t) in pred.iter().zip(target) {
            self.sq += (p - t) * (p - t);
            self.abs += (p - t).abs();
        }
        self.count += target.len();
    }

    fn finish(self) -> Metrics {
        let n = self.count as f64;
        Metrics { mse: self.sq / n, mae: self.abs / n, windows: self.windows }
    }
}

fn rescale(values: &mut [f64], raw: Option<&Standardizer>, horizon: usize) {
    if let Some(s) = raw {
        s.invert_channel_major(values, horizon);
    }
}

/// Averages squared and absolute error over every window, channel and step.
/// With `raw` set, predictions and targets are mapped back to the raw scale.
pub fn evaluate(model: &Jtft, windows: &Windows<'_>, batch_size: usize, raw: Option<&Standardizer>) -> AppResult<Metrics> {
    if windows.is_empty() {
        return Err(AppError::Data("no windows to evaluate".into()));
    }
    let t = windows.horizon();
    let mut sums = MetricSums::default();
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = windows.batch(chunk);
        let mut pred = model.predict(&x)?.into_data();
        let mut target = y.into_data();
        rescale(&mut pred, raw, t);
        rescale(&mut target, raw, t);
        let per = pred.len() / chunk.len();
        for (p, y) in pred.chunks_exact(per).zip(target.chunks_exact(per)) {
            sums.add(p, y);
            sums.windows += 1;
        }
    }
    Ok(sums.finish())
}

/// Repeats the last look-back value of each channel over the horizon.
pub fn naive_baseline(windows: &Windows<'_>, raw: Option<&Standardizer>) -> AppResult<Metrics> {
    if windows.is_empty() {
        return Err(AppError::Data("no windows to evaluate".into()));
    }
    let (l, t, d) = (windows.lookback(), windows.horizon(), windows.channels());
    let mut sums = MetricSums::default();
    for i in 0..windows.len() {
        let w = windows.get(i);
        let mut pred: Vec<f64> = (0..d).flat_map(|c| std::iter::repeat_n(w.x.data()[c * l + l - 1], t)).collect();
        let mut target = w.y.into_data();
        rescale(&mut pred, raw, t);
        rescale(&mut target, raw, t);
        sums.add(&pred, &target);
        sums.windows += 1;
    }
    Ok(sums.finish())
}

/// Non-overlapping training look-back windows used to place the initial
/// frequencies.
pub fn frequency_init_corpus(splits: &Splits, lookback: usize, horizon: usize) -> AppResult<Tensor> {
    let w = make_windows(&splits.train, lookback, horizon, lookback)?;
    let idx: Vec<usize> = (0..w.len()).collect();
    Ok(w.batch(&idx).0)
}

/// Trains `model` in place and leaves it holding the parameters of the best
/// validation epoch. `on_epoch` sees every finished epoch.
pub fn train(
    model: &mut Jtft,
    splits: &Splits,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let mut outcome = TrainOutcome { history: Vec::new(), best_epoch: None, best_val_mse: None, stopped_early: false };
    if cfg.epochs == 0 {
        return Ok(outcome);
    }
    let (l, t) = (model.config().lookback, model.config().horizon);
    let train_w = make_windows(&splits.train, l, t, cfg.window_stride)?;
    let val_w = make_windows(&splits.val, l, t, cfg.eval_stride)?;
    model.init_frequencies(&frequency_init_corpus(splits, l, t)?)?;
    model.constrain();

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut best = model.params().clone();
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let mut stale = 0;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_w.batch(chunk);
            let mut tape = Tape::new();
            let pred = model.forward(&mut tape, &x, true, &mut dropout_rng)?;
            let target = tape.constant_owned(y);
            let loss = tape.mse(pred, target)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(AppError::Divergence(format!("training loss is {value} at step {step} (epoch {epoch})")));
            }
            tape.backward(loss, model.params_mut())?;
            adam.step(model.params_mut())?;
            model.constrain();
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let val = evaluate(model, &val_w, cfg.batch_size, None)?;
        if !val.mse.is_finite() {
            return Err(AppError::Divergence(format!("validation MSE is {} after epoch {epoch}", val.mse)));
        }
        let record = EpochRecord { epoch, steps: step, train_loss: loss_sum / batches as f64, val_mse: val.mse, val_mae: val.mae };
        on_epoch(&record);
        outcome.history.push(record);
        if outcome.best_val_mse.is_none_or(|b| val.mse < b) {
            outcome.best_val_mse = Some(val.mse);
            outcome.best_epoch = Some(epoch);
            best.copy_values_from(model.params());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                outcome.stopped_early = epoch < cfg.epochs;
                break;
            }
        }
    }
    model.params_mut().copy_values_from(&best);
    Ok(outcome)
}
