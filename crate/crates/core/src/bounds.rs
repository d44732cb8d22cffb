//! Error-bound simulator comparing direct, step-by-step recursive and
//! variable-step forecasting under a superadditive per-jump error
//! `eps(l) = a * l^p` amplified by `lambda` per remaining step.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest horizon accepted by exhaustive composition enumeration.
pub const MAX_EXHAUSTIVE_HORIZON: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInstance {
    pub lambda: f64,
    pub a: f64,
    pub p: f64,
    pub horizon: usize,
}

impl BoundInstance {
    pub fn new(lambda: f64, a: f64, p: f64, horizon: usize) -> Result<Self> {
        let inst = BoundInstance { lambda, a, p, horizon };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 1.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 1, got {}", self.lambda)));
        }
        if !(self.a > 0.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("error scale a must be positive, got {}", self.a)));
        }
        if !(self.p > 1.0 && self.p.is_finite()) {
            return Err(Error::Config(format!("error exponent p must exceed 1 for strictly superadditive jump error, got {}", self.p)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-jump error `a * l^p`.
    pub fn eps(&self, len: usize) -> f64 {
        self.a * (len as f64).powf(self.p)
    }

    /// `sum_k lambda^(P - tau_k) eps(l_k)` where `tau_k` is the end of segment `k`.
    pub fn schedule_term(&self, partition: &[usize]) -> Result<f64> {
        if partition.iter().sum::<usize>() != self.horizon || partition.contains(&0) {
            return Err(Error::Config(format!(
                "{partition:?} is not a composition of {}",
                self.horizon
            )));
        }
        let mut tau = 0;
        let mut total = 0.0;
        for &len in partition {
            tau += len;
            total += self.lambda.powi((self.horizon - tau) as i32) * self.eps(len);
        }
        Ok(total)
    }

    /// `(1 - alpha) eps(P) + alpha * schedule_term(partition)`.
    pub fn mixed(&self, alpha: f64, partition: &[usize]) -> Result<f64> {
        Ok((1.0 - alpha) * bound_direct(self) + alpha * self.schedule_term(partition)?)
    }
}

/// One-shot forecast: `eps(P)`.
pub fn bound_direct(inst: &BoundInstance) -> f64 {
    inst.eps(inst.horizon)
}

/// Unit steps: `eps(1) (lambda^P - 1) / (lambda - 1)`, or `P eps(1)` at
/// `lambda = 1`.
pub fn bound_recursive(inst: &BoundInstance) -> f64 {
    let e1 = inst.eps(1);
    if inst.lambda == 1.0 {
        inst.horizon as f64 * e1
    } else {
        e1 * (inst.lambda.powi(inst.horizon as i32) - 1.0) / (inst.lambda - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalBound {
    /// Infimum over the gate `alpha` in (0, 1) and all compositions of P.
    pub value: f64,
    pub partition: Vec<usize>,
    /// Gate value at which the infimum is reached (or approached).
    pub alpha: f64,
    /// False when the infimum sits at an excluded endpoint of (0, 1).
    pub attained: bool,
}

fn finish(inst: &BoundInstance, best: f64, partition: Vec<usize>) -> OptimalBound {
    let direct = bound_direct(inst);
    // the bracket is affine in alpha: the smaller endpoint wins, or any
    // alpha does when both endpoints agree
    if best < direct {
        OptimalBound {
            value: best,
            partition,
            alpha: 1.0,
            attained: false,
        }
    } else {
        OptimalBound {
            value: direct,
            partition,
            alpha: 0.5,
            attained: true,
        }
    }
}

/// Exhaustive search over all `2^(P-1)` compositions of P.
pub fn bound_leapts_optimal(inst: &BoundInstance) -> Result<OptimalBound> {
    inst.validate()?;
    let p = inst.horizon;
    if p > MAX_EXHAUSTIVE_HORIZON {
        return Err(Error::Config(format!(
            "exhaustive enumeration supports P <= {MAX_EXHAUSTIVE_HORIZON}, got {p}; use the dynamic-programming route"
        )));
    }
    let mut best = f64::INFINITY;
    let mut best_partition = vec![p];
    for mask in 0u32..(1u32 << (p - 1)) {
        let part = composition_from_mask(mask, p);
        let v = inst.schedule_term(&part)?;
        if v < best {
            best = v;
            best_partition = part;
        }
    }
    Ok(finish(inst, best, best_partition))
}

/// Same infimum via an `O(P^2)` recursion over segment end points.
pub fn bound_leapts_optimal_dp(inst: &BoundInstance) -> Result<OptimalBound> {
    inst.validate()?;
    let p = inst.horizon;
    let mut cost = vec![f64::INFINITY; p + 1];
    let mut prev = vec![0usize; p + 1];
    cost[0] = 0.0;
    for tau in 1..=p {
        let weight = inst.lambda.powi((p - tau) as i32);
        for j in 0..tau {
            let c = cost[j] + weight * inst.eps(tau - j);
            if c < cost[tau] {
                cost[tau] = c;
                prev[tau] = j;
            }
        }
    }
    let mut partition = Vec::new();
    let mut tau = p;
    while tau > 0 {
        partition.push(tau - prev[tau]);
        tau = prev[tau];
    }
    partition.reverse();
    Ok(finish(inst, cost[p], partition))
}

/// Bit `i` of `mask` set means a cut after position `i + 1`.
pub fn composition_from_mask(mask: u32, horizon: usize) -> Vec<usize> {
    let mut part = Vec::new();
    let mut len = 1;
    for i in 0..horizon.saturating_sub(1) {
        if mask & (1 << i) != 0 {
            part.push(len);
            len = 1;
        } else {
            len += 1;
        }
    }
    part.push(len);
    part
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub lambda: f64,
    pub a: f64,
    pub p: f64,
    #[serde(rename = "P")]
    pub horizon: usize,
    pub b_dir: f64,
    pub b_rec: f64,
    pub b_star: f64,
    pub best_partition: String,
}

impl BoundRow {
    pub fn evaluate(inst: &BoundInstance) -> Result<Self> {
        let opt = if inst.horizon <= MAX_EXHAUSTIVE_HORIZON {
            bound_leapts_optimal(inst)?
        } else {
            bound_leapts_optimal_dp(inst)?
        };
        Ok(BoundRow {
            lambda: inst.lambda,
            a: inst.a,
            p: inst.p,
            horizon: inst.horizon,
            b_dir: bound_direct(inst),
            b_rec: bound_recursive(inst),
            b_star: opt.value,
            best_partition: opt.partition.iter().map(usize::to_string).collect::<Vec<_>>().join("-"),
        })
    }
}

/// Random instances with `lambda` in [1, 3], `a` in (0, 2], `p` in (1, 3]
/// and `P` in `[p_min, p_max]`.
pub fn random_instances(rng: &mut impl Rng, count: usize, p_min: usize, p_max: usize) -> Vec<BoundInstance> {
    (0..count)
        .map(|_| BoundInstance {
            lambda: rng.random_range(1.0..=3.0),
            a: 2.0 - rng.random_range(0.0..2.0),
            p: 3.0 - rng.random_range(0.0..2.0),
            horizon: rng.random_range(p_min..=p_max),
        })
        .collect()
}

pub fn write_bound_csv<W: Write>(out: W, rows: &[BoundRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_instance() {
        let inst = BoundInstance::new(2.0, 1.0, 2.0, 4).unwrap();
        assert_eq!(bound_direct(&inst), 16.0);
        assert_eq!(bound_recursive(&inst), 15.0);
        let opt = bound_leapts_optimal(&inst).unwrap();
        assert_eq!(opt.value, 15.0);
        assert_eq!(opt.partition, vec![1, 1, 1, 1]);
        assert_eq!(opt.alpha, 1.0);
        assert!(!opt.attained);
    }

    #[test]
    fn unit_lambda_limit() {
        let inst = BoundInstance::new(1.0, 1.0, 2.0, 4).unwrap();
        assert_eq!(bound_recursive(&inst), 4.0);
    }

    #[test]
    fn compositions_of_four() {
        let mut all: Vec<Vec<usize>> = (0..8).map(|m| composition_from_mask(m, 4)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 8);
        assert!(all.iter().all(|c| c.iter().sum::<usize>() == 4));
    }

    #[test]
    fn dp_agrees_with_enumeration() {
        let inst = BoundInstance::new(1.3, 0.7, 1.8, 9).unwrap();
        let a = bound_leapts_optimal(&inst).unwrap();
        let b = bound_leapts_optimal_dp(&inst).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn rejects_linear_error() {
        assert!(BoundInstance::new(2.0, 1.0, 1.0, 4).is_err());
    }
}
