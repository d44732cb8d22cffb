//! Control/time decomposition of state updates, volatility binning,
//! category statistics, trace overrides and JSONL trace export.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{Category, ScaleAnchors};
use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::LeapTs;
use crate::sched::{ScheduleTrace, StepOverride, StepRecord};

/// Denominator guard in the decomposition ratios.
pub const RATIO_EPS: f64 = 1e-12;
/// Version written into every exported trace record.
pub const TRACE_SCHEMA_VERSION: u32 = 1;
/// Volatility bins.
pub const VOLATILITY_BINS: usize = 4;
/// Windows per forward pass when evaluating large batches.
pub const EVAL_CHUNK: usize = 256;

/// `(C / (C + T + eps), T / (C + T + eps))`.
pub fn decompose_magnitudes(ctrl: f64, time: f64, eps: f64) -> (f64, f64) {
    let d = ctrl + time + eps;
    (ctrl / d, time / d)
}

/// Ratios from the two parts of a state update, each summarized by the sum
/// of absolute values.
pub fn decompose_update(ctrl: &[f64], time: &[f64], eps: f64) -> (f64, f64) {
    let c = ctrl.iter().map(|v| v.abs()).sum();
    let t = time.iter().map(|v| v.abs()).sum();
    decompose_magnitudes(c, t, eps)
}

/// Population standard deviation of first differences.
pub fn volatility(series: &[f64]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    let d: Vec<f64> = series.windows(2).map(|w| w[1] - w[0]).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt()
}

/// Fill each trace's volatility from its look-back window in `inputs: [B x L x N]`.
pub fn annotate_volatility(traces: &mut [ScheduleTrace], inputs: &Tensor) -> Result<()> {
    let s = inputs.shape();
    if s.len() != 3 {
        return Err(Error::shape("annotate_volatility", format!("{s:?}, expected [B, L, N]")));
    }
    let (l, n) = (s[1], s[2]);
    for tr in traces.iter_mut() {
        let base = tr.window * l * n;
        let col: Vec<f64> = (0..l).map(|t| inputs.data()[base + t * n + tr.variate]).collect();
        tr.volatility = Some(volatility(&col));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolatilityBin {
    pub bin: usize,
    /// Indices into the trace slice, in ascending volatility.
    pub members: Vec<usize>,
    pub volatility_range: (f64, f64),
    /// Step-averaged ratios.
    pub mean_eta_ctrl: f64,
    pub mean_eta_time: f64,
    pub category_distribution: Vec<f64>,
    pub mean_steps: f64,
}

/// Quartile bins over traces sorted by volatility, ties by index.
pub fn bin_by_volatility(traces: &[ScheduleTrace], categories: usize) -> Result<Vec<VolatilityBin>> {
    if traces.len() < VOLATILITY_BINS {
        return Err(Error::Data(format!(
            "volatility binning needs at least {VOLATILITY_BINS} windows, got {}",
            traces.len()
        )));
    }
    let vols: Vec<f64> = traces
        .iter()
        .map(|t| t.volatility.ok_or_else(|| Error::Data("trace without a volatility score".into())))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by(|&a, &b| vols[a].total_cmp(&vols[b]).then(a.cmp(&b)));
    let n = order.len();
    (0..VOLATILITY_BINS)
        .map(|b| {
            let members = order[b * n / VOLATILITY_BINS..(b + 1) * n / VOLATILITY_BINS].to_vec();
            let subset: Vec<ScheduleTrace> = members.iter().map(|&i| traces[i].clone()).collect();
            let steps: Vec<&StepRecord> = subset.iter().flat_map(|t| &t.steps).collect();
            let count = steps.len().max(1) as f64;
            let stats = category_stats(&subset, categories)?;
            Ok(VolatilityBin {
                bin: b,
                volatility_range: (vols[members[0]], vols[*members.last().expect("non-empty bin")]),
                members,
                mean_eta_ctrl: steps.iter().map(|s| s.eta_ctrl).sum::<f64>() / count,
                mean_eta_time: steps.iter().map(|s| s.eta_time).sum::<f64>() / count,
                category_distribution: stats.distribution,
                mean_steps: stats.mean_steps,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub counts: Vec<usize>,
    /// Share of scheduling steps per category.
    pub distribution: Vec<f64>,
    /// Average number of scheduling steps per trace.
    pub mean_steps: f64,
    pub traces: usize,
}

pub fn category_stats(traces: &[ScheduleTrace], categories: usize) -> Result<CategoryStats> {
    if traces.is_empty() {
        return Err(Error::Data("category statistics need at least one trace".into()));
    }
    let mut counts = vec![0usize; categories];
    let mut steps = 0usize;
    for tr in traces {
        for s in &tr.steps {
            *counts
                .get_mut(s.category)
                .ok_or_else(|| Error::Data(format!("category {} out of range", s.category)))? += 1;
        }
        steps += tr.steps.len();
    }
    let total = steps.max(1) as f64;
    Ok(CategoryStats {
        distribution: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
        mean_steps: steps as f64 / traces.len() as f64,
        traces: traces.len(),
    })
}

/// Externally imposed schedules for the trace ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Average over this many uniformly random partitions per window.
    MonteCarlo(usize),
    /// A constant step length.
    Fixed(usize),
}

/// Draw lengths uniformly from `[1, remaining]` until the horizon is covered.
pub fn random_partition(rng: &mut impl Rng, horizon: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut remaining = horizon;
    while remaining > 0 {
        let len = rng.random_range(1..=remaining);
        out.push(len);
        remaining -= len;
    }
    out
}

/// `step, step, ..., remainder`.
pub fn fixed_partition(horizon: usize, step: usize) -> Result<Vec<usize>> {
    if step == 0 || step > horizon {
        return Err(Error::Config(format!("fixed step {step} outside 1..={horizon}")));
    }
    let mut out = vec![step; horizon / step];
    if !horizon.is_multiple_of(step) {
        out.push(horizon % step);
    }
    Ok(out)
}

/// Imposed `(category, length)` steps for a partition; each length is routed
/// to the category whose interval holds it.
pub fn partition_overrides(anchors: &ScaleAnchors, partition: &[usize]) -> Vec<StepOverride> {
    partition
        .iter()
        .map(|&len| StepOverride {
            category: anchors.category_for(len as f64),
            len: len as f64,
        })
        .collect()
}

/// Forecasts `[B x P x N]` and traces for every window, in chunks.
/// `overrides` is indexed by row `window * N + variate`.
pub fn forecast_windows(
    model: &LeapTs,
    windows: &WindowBatch,
    overrides: Option<&[Vec<StepOverride>]>,
) -> Result<(Tensor, Vec<ScheduleTrace>)> {
    let n = windows.variates;
    let chunks: Vec<(usize, usize)> = (0..windows.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(windows.len())))
        .collect();
    let parts: Vec<(Tensor, Vec<ScheduleTrace>)> = chunks
        .par_iter()
        .map(|&(s, e)| {
            let idx: Vec<usize> = (s..e).collect();
            let sub = windows.select(&idx);
            let ov = overrides.map(|o| &o[s * n..e * n]);
            let (pred, mut traces) = model.predict_with(&sub.inputs, ov)?;
            for tr in &mut traces {
                tr.window += s;
            }
            Ok((pred, traces))
        })
        .collect::<Result<_>>()?;
    let (p, b) = (windows.horizon, windows.len());
    let mut data = Vec::with_capacity(b * p * n);
    let mut traces = Vec::with_capacity(b * n);
    for (pred, tr) in parts {
        data.extend_from_slice(pred.data());
        traces.extend(tr);
    }
    annotate_volatility(&mut traces, &windows.inputs)?;
    Ok((Tensor::new(vec![b, p, n], data)?, traces))
}

/// Metrics of forecasts `pred: [B x P x N]` against the batch targets.
pub fn score(windows: &WindowBatch, pred: &Tensor, seasonality: usize) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(windows.horizon, windows.variates, seasonality, None);
    acc.push_batch(pred, &windows.targets, Some(&windows.inputs))?;
    Ok(acc.finish())
}

/// Evaluate with schedules imposed from outside the controller. The learned
/// heads still produce the segments and state updates.
pub fn trace_override(model: &LeapTs, windows: &WindowBatch, mode: TraceMode, seed: u64, seasonality: usize) -> Result<MetricReport> {
    let rows = windows.len() * windows.variates;
    let p = model.config.horizon;
    match mode {
        TraceMode::Fixed(step) => {
            let part = partition_overrides(&model.anchors, &fixed_partition(p, step)?);
            let ov = vec![part; rows];
            let (pred, _) = forecast_windows(model, windows, Some(&ov))?;
            score(windows, &pred, seasonality)
        }
        TraceMode::MonteCarlo(draws) => {
            if draws == 0 {
                return Err(Error::Config("Monte Carlo trace ablation needs at least one draw".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut reports = Vec::with_capacity(draws);
            for _ in 0..draws {
                let ov: Vec<Vec<StepOverride>> = (0..rows)
                    .map(|_| partition_overrides(&model.anchors, &random_partition(&mut rng, p)))
                    .collect();
                let (pred, _) = forecast_windows(model, windows, Some(&ov))?;
                reports.push(score(windows, &pred, seasonality)?);
            }
            Ok(average_reports(&reports))
        }
    }
}

/// Field-wise mean of several reports.
pub fn average_reports(reports: &[MetricReport]) -> MetricReport {
    let k = reports.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let opt_mean = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Option<Vec<f64>> = reports.iter().map(f).collect();
        v.map(|v| v.iter().sum::<f64>() / k)
    };
    let mut out = MetricReport {
        mse: mean(&|r| r.mse),
        mae: mean(&|r| r.mae),
        smape: mean(&|r| r.smape),
        mape: mean(&|r| r.mape),
        mase: opt_mean(&|r| r.mase),
        owa: opt_mean(&|r| r.owa),
        per_horizon: Vec::new(),
        windows: reports.first().map_or(0, |r| r.windows),
        mase_skipped: reports.first().map_or(0, |r| r.mase_skipped),
    };
    if let Some(first) = reports.first() {
        out.per_horizon = (0..first.per_horizon.len())
            .map(|h| crate::metrics::HorizonMetrics {
                mse: reports.iter().map(|r| r.per_horizon[h].mse).sum::<f64>() / k,
                mae: reports.iter().map(|r| r.per_horizon[h].mae).sum::<f64>() / k,
            })
            .collect();
    }
    out
}

/// One exported scheduling step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub version: u32,
    pub window: usize,
    pub variate: usize,
    pub volatility: Option<f64>,
    pub step: usize,
    pub category: usize,
    pub category_name: String,
    pub soft: Vec<f64>,
    pub len_cont: f64,
    pub len_int: usize,
    pub cursor_before: usize,
    pub cursor_after: usize,
    pub ctrl_mag: f64,
    pub time_mag: f64,
    pub eta_ctrl: f64,
    pub eta_time: f64,
    pub forced: bool,
}

fn category_name(categories: usize, c: usize) -> String {
    if categories == Category::ALL.len() {
        Category::ALL[c].name().to_string()
    } else {
        "single".to_string()
    }
}

pub fn write_traces_jsonl<W: Write>(mut out: W, traces: &[ScheduleTrace], categories: usize) -> Result<()> {
    for tr in traces {
        for s in &tr.steps {
            let rec = TraceRecord {
                version: TRACE_SCHEMA_VERSION,
                window: tr.window,
                variate: tr.variate,
                volatility: tr.volatility,
                step: s.step,
                category: s.category,
                category_name: category_name(categories, s.category),
                soft: s.soft.clone(),
                len_cont: s.len_cont,
                len_int: s.len_int,
                cursor_before: s.cursor_before,
                cursor_after: s.cursor_after,
                ctrl_mag: s.ctrl_mag,
                time_mag: s.time_mag,
                eta_ctrl: s.eta_ctrl,
                eta_time: s.eta_time,
                forced: s.forced,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Regroup exported records into traces, in order of first appearance.
pub fn read_traces_jsonl<R: BufRead>(input: R) -> Result<Vec<ScheduleTrace>> {
    let mut traces: Vec<ScheduleTrace> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("trace line {}: {e}", i + 1)))?;
        if rec.version != TRACE_SCHEMA_VERSION {
            return Err(Error::Data(format!(
                "trace line {}: schema version {} (expected {TRACE_SCHEMA_VERSION})",
                i + 1,
                rec.version
            )));
        }
        let step = StepRecord {
            step: rec.step,
            category: rec.category,
            soft: rec.soft,
            len_cont: rec.len_cont,
            len_int: rec.len_int,
            cursor_before: rec.cursor_before,
            cursor_after: rec.cursor_after,
            ctrl_mag: rec.ctrl_mag,
            time_mag: rec.time_mag,
            eta_ctrl: rec.eta_ctrl,
            eta_time: rec.eta_time,
            forced: rec.forced,
        };
        match traces.last_mut() {
            Some(t) if t.window == rec.window && t.variate == rec.variate && rec.step > 1 => t.steps.push(step),
            _ => traces.push(ScheduleTrace {
                window: rec.window,
                variate: rec.variate,
                volatility: rec.volatility,
                steps: vec![step],
            }),
        }
    }
    Ok(traces)
}
