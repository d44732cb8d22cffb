//! Training loop: sharded forward/backward passes, Huber loss on the fused
//! forecast, Adam, Gumbel temperature annealing and early stopping.

use std::io::Write;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::cluster_variates;
use crate::data::{make_windows, Dataset, Scaler, Split, WindowBatch};
use crate::diagnostics::{forecast_windows, score};
use crate::error::{Error, Result};
use crate::grad::{huber_loss, AdamConfig, Gradients, Tape, Tensor};
use crate::metrics::MetricReport;
use crate::model::{windows_to_rows, Ablation, LeapTs};
use crate::sched::{PassControl, Routing};

/// Windows per independent forward/backward shard inside a batch. Fixed so
/// results do not depend on the thread count.
pub const SHARD: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub huber_delta: f64,
    pub seed: u64,
    /// Replaces the model's ablation flag when set.
    pub ablation: Option<Ablation>,
    /// Window stride in every split.
    pub stride: usize,
    /// Cap on training batches per epoch (random subset).
    pub max_batches: Option<usize>,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Standardize every variate with train-split statistics.
    pub scale: bool,
    /// MASE seasonality.
    pub seasonality: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            patience: 5,
            huber_delta: 1.0,
            seed: 0,
            ablation: None,
            stride: 1,
            max_batches: None,
            grad_clip: Some(5.0),
            scale: true,
            seasonality: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 || self.stride == 0 {
            return Err(Error::Config("batch_size, epochs, patience and stride must be at least 1".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.seasonality == 0 {
            return Err(Error::Config("seasonality must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub gumbel_temperature: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub test: MetricReport,
    pub parameters: usize,
    pub clusters: Vec<usize>,
    pub diverged: bool,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: LeapTs,
    pub scaler: Scaler,
    pub report: TrainReport,
}

/// Windows of all three splits after dataset-level scaling.
pub struct SplitWindows {
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
    pub scaler: Scaler,
}

pub fn prepare_windows(data: &Dataset, lookback: usize, horizon: usize, stride: usize, scale: bool) -> Result<SplitWindows> {
    let (s, e) = data.range(Split::Train);
    let scaler = if scale {
        Scaler::fit(&data.slice_rows(s, e))
    } else {
        Scaler::identity(data.variates())
    };
    let mut scaled = data.clone();
    scaled.values = scaler.apply(&data.values);
    Ok(SplitWindows {
        train: make_windows(&scaled, lookback, horizon, Split::Train, stride)?,
        val: make_windows(&scaled, lookback, horizon, Split::Val, stride)?,
        test: make_windows(&scaled, lookback, horizon, Split::Test, stride)?,
        scaler,
    })
}

/// Mean Huber loss of the fused forecast over every window, evaluated
/// without noise.
pub fn validation_loss(model: &LeapTs, windows: &WindowBatch, delta: f64) -> Result<f64> {
    let (pred, _) = forecast_windows(model, windows, None)?;
    huber_loss(&pred, &windows.targets, delta)
}

/// Metrics over every window, in the units the windows are stored in.
pub fn evaluate(model: &LeapTs, windows: &WindowBatch, seasonality: usize) -> Result<MetricReport> {
    let (pred, _) = forecast_windows(model, windows, None)?;
    score(windows, &pred, seasonality)
}

/// Loss and parameter gradients for one batch, in train mode. Shards run in
/// parallel; each draws Gumbel noise from its own seed.
pub fn batch_gradients(model: &LeapTs, batch: &WindowBatch, delta: f64, seed: u64) -> Result<(f64, Gradients)> {
    let b = batch.len();
    let shards: Vec<(usize, usize, u64)> = (0..b)
        .step_by(SHARD)
        .enumerate()
        .map(|(i, s)| (s, (s + SHARD).min(b), seed.wrapping_add(i as u64)))
        .collect();
    let parts: Vec<(f64, Gradients)> = shards
        .par_iter()
        .map(|&(s, e, shard_seed)| {
            let idx: Vec<usize> = (s..e).collect();
            let sub = batch.select(&idx);
            let mut rng = ChaCha8Rng::seed_from_u64(shard_seed);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &sub.inputs, Routing::Sample(&mut rng), &PassControl::default())?;
            let target = windows_to_rows(&sub.targets, batch.horizon, batch.variates)?;
            let target = tape.constant(target)?;
            let loss = tape.huber(out.fused, target, delta)?;
            let weight = (e - s) as f64 / b as f64;
            let scaled = tape.scale(loss, weight)?;
            let value = tape.value(scaled).data()[0];
            let grads = tape.backward(scaled)?;
            Ok((value, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for (l, g) in parts {
        total += l;
        grads.accumulate(&g)?;
    }
    model.params.fill_missing(&mut grads);
    Ok((total, grads))
}

/// Exponential interpolation between the start and final Gumbel temperatures.
pub fn annealed_temperature(start: f64, end: Option<f64>, epoch: usize, epochs: usize) -> f64 {
    match end {
        Some(end) if epochs > 1 => start * (end / start).powf(epoch as f64 / (epochs - 1) as f64),
        _ => start,
    }
}

fn unix_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Train on the train split, early-stop on the validation split and score
/// the best epoch on the test split. Each epoch is appended to `log` as one
/// JSON line.
///
/// A non-finite loss or gradient stops training; the best parameters so far
/// are returned with `diverged` set.
pub fn train(mut model: LeapTs, data: &Dataset, cfg: &TrainConfig, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(flag) = cfg.ablation {
        if flag != model.config.ablation {
            model = model.ablate(flag)?;
        }
    }
    let (l, p) = (model.config.lookback, model.config.horizon);
    if data.variates() != model.config.variates {
        return Err(Error::Config(format!(
            "dataset has {} variates, model expects {}",
            data.variates(),
            model.config.variates
        )));
    }
    let started = Instant::now();
    let windows = prepare_windows(data, l, p, cfg.stride, cfg.scale)?;
    if model.config.clusters > 1 {
        let (s, e) = data.range(Split::Train);
        let train_series = windows.scaler.apply(&data.slice_rows(s, e));
        let assignment = cluster_variates(&train_series, model.config.clusters, cfg.seed)?;
        model.set_clusters(assignment.assignment)?;
    }

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let mut diverged = false;
    let mut stopped_early = false;

    'epochs: for epoch in 1..=cfg.epochs {
        model.gumbel_temperature = annealed_temperature(
            model.config.gumbel_temperature,
            model.config.gumbel_final_temperature,
            epoch - 1,
            cfg.epochs,
        );
        let mut order: Vec<usize> = (0..windows.train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_batches {
            batches.truncate(cap.max(1));
        }
        let mut train_loss = 0.0;
        for idx in &batches {
            let batch = windows.train.select(idx);
            let step = batch_gradients(&model, &batch, cfg.huber_delta, rng.next_u64());
            let (loss, mut grads) = match step {
                Ok(v) if v.0.is_finite() && v.1.global_norm().is_finite() => v,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            model.params.adam_step(&grads, &adam)?;
            train_loss += loss / batches.len() as f64;
        }
        let val_loss = match validation_loss(&model, &windows.val, cfg.huber_delta) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.lr,
            gumbel_temperature: model.gumbel_temperature,
            timestamp: unix_time(),
            elapsed_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        epochs.push(entry);
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let test = evaluate(&best, &windows.test, cfg.seasonality)?;
    let report = TrainReport {
        epochs,
        best_epoch,
        best_val_loss: best_val,
        test,
        parameters: best.parameter_count(),
        clusters: best.clusters.clone(),
        diverged,
        stopped_early,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model: best,
        scaler: windows.scaler,
        report,
    })
}

/// Forecast in original units for `[B x L x N]` raw inputs.
pub fn predict_raw(model: &LeapTs, scaler: &Scaler, inputs: &Tensor) -> Result<Tensor> {
    let pred = model.predict(&scaler.apply(inputs))?;
    Ok(scaler.invert(&pred))
}
