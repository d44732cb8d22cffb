//! Point-forecast error metrics (MSE, MAE, SMAPE, MAPE, MASE, OWA).
//!
//! Arrays are `[P x N]` (time by variate) in row-major order unless noted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Naive2 reference scores that OWA is normalized by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NaiveReference {
    pub smape: f64,
    pub mase: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mse: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: f64,
    /// Absent when no history was supplied or every window had a flat history.
    pub mase: Option<f64>,
    /// Needs Naive2 reference values.
    pub owa: Option<f64>,
    /// Error at each forecast step, averaged over windows and variates.
    pub per_horizon: Vec<HorizonMetrics>,
    pub windows: usize,
    /// Windows left out of MASE because their history has no variation.
    #[serde(default)]
    pub mase_skipped: usize,
}

fn check_pair(op: &'static str, pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::shape(op, format!("pred has {} values, truth {}", pred.len(), truth.len())));
    }
    Ok(())
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mse", pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mae", pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `200/n * sum |y - yhat| / (|y| + |yhat|)`; terms with a zero denominator
/// contribute 0.
pub fn smape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("smape", pred, truth)?;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| {
            let d = p.abs() + t.abs();
            if d == 0.0 {
                0.0
            } else {
                (t - p).abs() / d
            }
        })
        .sum();
    Ok(200.0 * total / pred.len() as f64)
}

/// `100/n * sum |y - yhat| / |y|`; terms with `y == 0` contribute 0.
pub fn mape(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("mape", pred, truth)?;
    let total: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| if *t == 0.0 { 0.0 } else { (t - p).abs() / t.abs() })
        .sum();
    Ok(100.0 * total / pred.len() as f64)
}

/// Mean absolute `s`-step difference of a `[L x N]` history, pooled over
/// variates.
pub fn seasonal_scale(history: &[f64], variates: usize, s: usize) -> Result<f64> {
    if s == 0 || variates == 0 || !history.len().is_multiple_of(variates) {
        return Err(Error::Config(format!(
            "seasonal scale needs s >= 1 and a [L x {variates}] history"
        )));
    }
    let l = history.len() / variates;
    if l <= s {
        return Err(Error::Data(format!("history of length {l} too short for seasonality {s}")));
    }
    let mut total = 0.0;
    for j in s..l {
        for v in 0..variates {
            total += (history[j * variates + v] - history[(j - s) * variates + v]).abs();
        }
    }
    Ok(total / ((l - s) * variates) as f64)
}

/// MAE of the forecast divided by the in-sample seasonal naive MAE.
pub fn mase(pred: &[f64], truth: &[f64], history: &[f64], variates: usize, s: usize) -> Result<f64> {
    let scale = seasonal_scale(history, variates, s)?;
    if scale == 0.0 {
        return Err(Error::Numeric("MASE denominator is zero (flat history)".into()));
    }
    Ok(mae(pred, truth)? / scale)
}

pub fn owa(smape: f64, mase: f64, naive: NaiveReference) -> Result<f64> {
    if !(naive.smape > 0.0 && naive.mase > 0.0) {
        return Err(Error::Config(format!("Naive2 references must be positive, got {naive:?}")));
    }
    Ok(0.5 * (smape / naive.smape + mase / naive.mase))
}

/// Metrics of a single `[P x N]` forecast.
pub fn metrics(
    pred: &Tensor,
    truth: &Tensor,
    history: Option<&Tensor>,
    s: usize,
    naive: Option<NaiveReference>,
) -> Result<MetricReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let n = pred.cols();
    let mut acc = MetricAccumulator::new(pred.len() / n, n, s, naive);
    acc.push(pred.data(), truth.data(), history.map(Tensor::data), true)?;
    Ok(acc.finish())
}

/// Running averages over many windows. MSE and MAE are pooled over all
/// values; SMAPE, MAPE and MASE are averaged per window.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    horizon: usize,
    variates: usize,
    s: usize,
    naive: Option<NaiveReference>,
    sq: Vec<f64>,
    abs: Vec<f64>,
    smape: f64,
    mape: f64,
    mase: f64,
    mase_count: usize,
    mase_skipped: usize,
    windows: usize,
}

impl MetricAccumulator {
    pub fn new(horizon: usize, variates: usize, s: usize, naive: Option<NaiveReference>) -> Self {
        MetricAccumulator {
            horizon,
            variates,
            s,
            naive,
            sq: vec![0.0; horizon],
            abs: vec![0.0; horizon],
            smape: 0.0,
            mape: 0.0,
            mase: 0.0,
            mase_count: 0,
            mase_skipped: 0,
            windows: 0,
        }
    }

    /// Add one window. With `strict`, a flat history is an error; otherwise
    /// the window is counted in `mase_skipped`.
    pub fn push(&mut self, pred: &[f64], truth: &[f64], history: Option<&[f64]>, strict: bool) -> Result<()> {
        let (p, n) = (self.horizon, self.variates);
        if pred.len() != p * n || truth.len() != p * n {
            return Err(Error::shape(
                "metrics",
                format!("expected {p}x{n} values, got {} and {}", pred.len(), truth.len()),
            ));
        }
        for t in 0..p {
            for v in 0..n {
                let e = pred[t * n + v] - truth[t * n + v];
                self.sq[t] += e * e;
                self.abs[t] += e.abs();
            }
        }
        self.smape += smape(pred, truth)?;
        self.mape += mape(pred, truth)?;
        if let Some(hist) = history {
            match mase(pred, truth, hist, n, self.s) {
                Ok(m) => {
                    self.mase += m;
                    self.mase_count += 1;
                }
                Err(Error::Numeric(_)) if !strict => self.mase_skipped += 1,
                Err(e) => return Err(e),
            }
        }
        self.windows += 1;
        Ok(())
    }

    /// Add a `[B x P x N]` batch with matching `[B x L x N]` inputs.
    pub fn push_batch(&mut self, pred: &Tensor, truth: &Tensor, inputs: Option<&Tensor>) -> Result<()> {
        let per = self.horizon * self.variates;
        if pred.len() != truth.len() || !pred.len().is_multiple_of(per) {
            return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), truth.shape())));
        }
        let b = pred.len() / per;
        let hist_len = inputs.map(|x| x.len() / b.max(1));
        for w in 0..b {
            let hist = inputs.zip(hist_len).map(|(x, h)| &x.data()[w * h..(w + 1) * h]);
            self.push(
                &pred.data()[w * per..(w + 1) * per],
                &truth.data()[w * per..(w + 1) * per],
                hist,
                false,
            )?;
        }
        Ok(())
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn finish(&self) -> MetricReport {
        if self.windows == 0 {
            return MetricReport::default();
        }
        let w = self.windows as f64;
        let per_step = w * self.variates as f64;
        let per_horizon: Vec<HorizonMetrics> = self
            .sq
            .iter()
            .zip(&self.abs)
            .map(|(s, a)| HorizonMetrics {
                mse: s / per_step,
                mae: a / per_step,
            })
            .collect();
        let total = per_step * self.horizon as f64;
        let smape = self.smape / w;
        let mase = (self.mase_count > 0).then(|| self.mase / self.mase_count as f64);
        let owa = match (mase, self.naive) {
            (Some(m), Some(r)) => owa(smape, m, r).ok(),
            _ => None,
        };
        MetricReport {
            mse: self.sq.iter().sum::<f64>() / total,
            mae: self.abs.iter().sum::<f64>() / total,
            smape,
            mape: self.mape / w,
            mase,
            owa,
            per_horizon,
            windows: self.windows,
            mase_skipped: self.mase_skipped,
        }
    }
}
