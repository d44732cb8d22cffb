//! CSV datasets, chronological splits, sliding windows and standardization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Variates with a standard deviation at or below this keep unit scale.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[T x N]`, rows in file order.
    pub values: Tensor,
    pub columns: Vec<String>,
    /// Time column, when the file has one.
    pub index: Option<Vec<String>>,
    pub frequency: Option<String>,
    pub splits: SplitFractions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// Half-open row ranges of the three splits for a series of length `t`.
    pub fn bounds(&self, t: usize) -> [(usize, usize); 3] {
        let a = (self.train * t as f64).round() as usize;
        let b = ((self.train + self.val) * t as f64).round() as usize;
        let (a, b) = (a.min(t), b.min(t).max(a.min(t)));
        [(0, a), (a, b), (b, t)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    /// The whole series.
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.is_empty() {
            return Err(Error::Data("dataset must be a non-empty [T x N] matrix".into()));
        }
        if !values.is_finite() {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        let columns = (1..=values.cols()).map(|i| format!("v{i}")).collect();
        Ok(Dataset {
            name: name.into(),
            values,
            columns,
            index: None,
            frequency: None,
            splits: SplitFractions::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.values.cols()
    }

    pub fn range(&self, split: Split) -> (usize, usize) {
        let b = self.splits.bounds(self.len());
        match split {
            Split::Train => b[0],
            Split::Val => b[1],
            Split::Test => b[2],
            Split::All => (0, self.len()),
        }
    }

    /// Rows `[start, end)` as a `[T' x N]` matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let n = self.variates();
        Tensor::matrix(end - start, n, self.values.data()[start * n..end * n].to_vec())
    }

    /// Column `v` as a vector.
    pub fn column(&self, v: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values.get(t, v)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec = vec![match &self.index {
                Some(idx) => idx[t].clone(),
                None => t.to_string(),
            }];
            rec.extend(self.values.row_slice(t).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Read a CSV with a header row. A leading column named `t` or `date`, or
/// whose first cell is not numeric, is kept as the index instead of data.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let first = header.first().map(|h| h.to_ascii_lowercase()).unwrap_or_default();
    let has_index = first == "t"
        || first == "date"
        || records[0].get(0).is_some_and(|c| c.trim().parse::<f64>().is_err());
    let skip = usize::from(has_index);
    if header.len() <= skip {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let n = header.len() - skip;
    let mut values = Vec::with_capacity(records.len() * n);
    let mut index = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                r + 1,
                rec.len(),
                header.len()
            )));
        }
        if has_index {
            index.push(rec[0].to_string());
        }
        for c in skip..rec.len() {
            let v: f64 = rec[c].trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric value `{}` at row {}, column {}",
                    path.display(),
                    &rec[c],
                    r + 1,
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value at row {}, column {}",
                    path.display(),
                    r + 1,
                    c + 1
                )));
            }
            values.push(v);
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Dataset {
        name,
        values: Tensor::matrix(records.len(), n, values),
        columns: header[skip..].to_vec(),
        index: has_index.then_some(index),
        frequency: None,
        splits: SplitFractions::default(),
    })
}

/// Sliding windows over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B x L x N]`.
    pub inputs: Tensor,
    /// `[B x P x N]`.
    pub targets: Tensor,
    /// Row of the first input step of each window.
    pub starts: Vec<usize>,
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Sub-batch of the windows at `idx`.
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let (l, p, n) = (self.lookback, self.horizon, self.variates);
        let mut inputs = Vec::with_capacity(idx.len() * l * n);
        let mut targets = Vec::with_capacity(idx.len() * p * n);
        for &i in idx {
            inputs.extend_from_slice(&self.inputs.data()[i * l * n..(i + 1) * l * n]);
            targets.extend_from_slice(&self.targets.data()[i * p * n..(i + 1) * p * n]);
        }
        WindowBatch {
            inputs: Tensor::new(vec![idx.len(), l, n], inputs).expect("sizes match"),
            targets: Tensor::new(vec![idx.len(), p, n], targets).expect("sizes match"),
            starts: idx.iter().map(|&i| self.starts[i]).collect(),
            lookback: l,
            horizon: p,
            variates: n,
        }
    }

    /// Input window `i` as `[L x N]`.
    pub fn input(&self, i: usize) -> Tensor {
        let (l, n) = (self.lookback, self.variates);
        Tensor::matrix(l, n, self.inputs.data()[i * l * n..(i + 1) * l * n].to_vec())
    }
}

/// All windows `(X[s..s+L], Y[s+L..s+L+P])` lying entirely inside `split`,
/// with starts advancing by `stride`.
pub fn make_windows(data: &Dataset, lookback: usize, horizon: usize, split: Split, stride: usize) -> Result<WindowBatch> {
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("look-back, horizon and stride must be positive".into()));
    }
    data.splits.validate()?;
    let (start, end) = data.range(split);
    let span = lookback + horizon;
    if end - start < span {
        return Err(Error::Data(format!(
            "{split:?} split has {} rows, need at least L+P = {span}",
            end - start
        )));
    }
    let n = data.variates();
    let starts: Vec<usize> = (start..=end - span).step_by(stride).collect();
    let mut inputs = Vec::with_capacity(starts.len() * lookback * n);
    let mut targets = Vec::with_capacity(starts.len() * horizon * n);
    let d = data.values.data();
    for &s in &starts {
        inputs.extend_from_slice(&d[s * n..(s + lookback) * n]);
        targets.extend_from_slice(&d[(s + lookback) * n..(s + span) * n]);
    }
    Ok(WindowBatch {
        inputs: Tensor::new(vec![starts.len(), lookback, n], inputs)?,
        targets: Tensor::new(vec![starts.len(), horizon, n], targets)?,
        starts,
        lookback,
        horizon,
        variates: n,
    })
}

/// Per-variate mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(variates: usize) -> Self {
        Scaler {
            mean: vec![0.0; variates],
            std: vec![1.0; variates],
        }
    }

    /// Statistics of the columns of a `[T x N]` matrix; flat columns get
    /// the identity transform.
    pub fn fit(x: &Tensor) -> Self {
        let (t, n) = (x.rows(), x.cols());
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for v in 0..n {
            let m = (0..t).map(|i| x.get(i, v)).sum::<f64>() / t as f64;
            let var = (0..t).map(|i| (x.get(i, v) - m).powi(2)).sum::<f64>() / t as f64;
            // degenerate variates pass through unchanged
            (mean[v], std[v]) = if var.sqrt() > MIN_STD { (m, var.sqrt()) } else { (0.0, 1.0) };
        }
        Scaler { mean, std }
    }

    /// Standardize any tensor whose last axis is the variate axis.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let n = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % n]) / self.std[i % n];
        }
        out
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        let n = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % n] + self.mean[i % n];
        }
        out
    }
}

/// Standardize a `[T x N]` window per variate.
pub fn standardize(window: &Tensor) -> (Tensor, Scaler) {
    let scaler = Scaler::fit(window);
    (scaler.apply(window), scaler)
}

pub fn destandardize(window: &Tensor, scaler: &Scaler) -> Tensor {
    scaler.invert(window)
}

/// Standardize each row of a `[R x L]` matrix in place; returns the row
/// means and scales.
pub fn standardize_rows(rows: &mut Tensor) -> (Vec<f64>, Vec<f64>) {
    let (r, l) = (rows.rows(), rows.cols());
    let mut means = Vec::with_capacity(r);
    let mut stds = Vec::with_capacity(r);
    let d = rows.data_mut();
    for i in 0..r {
        let row = &mut d[i * l..(i + 1) * l];
        let m = row.iter().sum::<f64>() / l as f64;
        let sd = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l as f64).sqrt();
        let (m, sd) = if sd > MIN_STD { (m, sd) } else { (0.0, 1.0) };
        for v in row.iter_mut() {
            *v = (*v - m) / sd;
        }
        means.push(m);
        stds.push(sd);
    }
    (means, stds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize) -> Dataset {
        Dataset::new("s", Tensor::matrix(t, 1, (0..t).map(|i| i as f64).collect())).unwrap()
    }

    #[test]
    fn window_count() {
        let w = make_windows(&series(10), 3, 2, Split::All, 1).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w.targets.data()[..2], [3.0, 4.0]);
        let one = make_windows(&series(5), 3, 2, Split::All, 1).unwrap();
        assert_eq!(one.len(), 1);
        let disjoint = make_windows(&series(10), 3, 2, Split::All, 5).unwrap();
        assert_eq!(disjoint.starts, vec![0, 5]);
    }

    #[test]
    fn short_split_is_an_error() {
        assert!(make_windows(&series(4), 3, 2, Split::All, 1).is_err());
    }

    #[test]
    fn standardize_hand_values() {
        let x = Tensor::matrix(2, 1, vec![0.0, 2.0]);
        let (z, s) = standardize(&x);
        assert_eq!(z.data(), &[-1.0, 1.0]);
        assert_eq!(destandardize(&z, &s), x);
        let flat = Tensor::matrix(3, 1, vec![4.0; 3]);
        let (z, s) = standardize(&flat);
        assert_eq!((s.mean[0], s.std[0]), (0.0, 1.0));
        assert_eq!(z, flat);
    }
}
