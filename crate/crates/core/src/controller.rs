//! Scale anchors and the two-level scheduling decision.
//!
//! The high level picks one of three step-size categories with a
//! Gumbel-softmax straight-through estimator; the low level maps a length
//! head's output into the chosen category's admissible interval.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Short,
    Mid,
    Long,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Short, Category::Mid, Category::Long];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Short => "short",
            Category::Mid => "mid",
            Category::Long => "long",
        }
    }
}

/// Admissible advancement lengths per category.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleAnchors {
    /// Inclusive `(min, max)` per category. Three entries normally; a single
    /// `[1, P]` entry in single-level mode.
    pub intervals: Vec<(usize, usize)>,
    pub degenerate: bool,
    pub horizon: usize,
}

/// Interval construction from look-back `lookback` and horizon `horizon`.
///
/// Upper anchors: short = max(1, min(L/4, P-1)), mid = max(short+1,
/// min(L/2, P-1)), long = P. Lower bounds: short = 1, mid = max(2, min(mid,
/// short+1)), long = max(3, min(P, max(mid+1, P/2))). When
/// `P <= L/4 + 1` a single `[1, P]` interval is used instead. The same
/// fallback applies to the few tiny `(L, P)` pairs (L < 4, P = 2) where the
/// formulas would produce an empty interval.
pub fn scale_anchors(lookback: usize, horizon: usize) -> Result<ScaleAnchors> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "look-back and horizon must be positive (L={lookback}, P={horizon})"
        )));
    }
    let (l, p) = (lookback, horizon);
    let single = ScaleAnchors {
        intervals: vec![(1, p)],
        degenerate: true,
        horizon: p,
    };
    if p <= l / 4 + 1 {
        return Ok(single);
    }
    let short_max = 1.max((l / 4).min(p - 1));
    let mid_max = (short_max + 1).max((l / 2).min(p - 1));
    let long_max = p;
    let short_min = 1;
    let mid_min = 2.max(mid_max.min(short_max + 1));
    let long_min = 3.max(long_max.min((mid_max + 1).max(long_max / 2)));
    let intervals = vec![(short_min, short_max), (mid_min, mid_max), (long_min, long_max)];
    if intervals.iter().any(|&(lo, hi)| lo > hi || hi > p) {
        return Ok(single);
    }
    Ok(ScaleAnchors {
        intervals,
        degenerate: false,
        horizon: p,
    })
}

impl ScaleAnchors {
    /// Single-level anchors covering `[1, P]`.
    pub fn single(horizon: usize) -> Self {
        ScaleAnchors {
            intervals: vec![(1, horizon)],
            degenerate: true,
            horizon,
        }
    }

    pub fn categories(&self) -> usize {
        self.intervals.len()
    }

    /// Index of the highest (longest) category.
    pub fn longest(&self) -> usize {
        self.intervals.len() - 1
    }

    /// Lowest category whose interval contains `len`; falls back to the
    /// category with the nearest interval.
    pub fn category_for(&self, len: f64) -> usize {
        if let Some(i) = self
            .intervals
            .iter()
            .position(|&(lo, hi)| len >= lo as f64 && len <= hi as f64)
        {
            return i;
        }
        let dist = |&(lo, hi): &(usize, usize)| {
            if len < lo as f64 {
                lo as f64 - len
            } else {
                len - hi as f64
            }
        };
        let mut best = 0;
        for i in 1..self.intervals.len() {
            if dist(&self.intervals[i]) < dist(&self.intervals[best]) {
                best = i;
            }
        }
        best
    }

    /// Positions in `1..=P` not reachable by any category.
    pub fn gaps(&self) -> Vec<usize> {
        (1..=self.horizon)
            .filter(|&x| !self.intervals.iter().any(|&(lo, hi)| x >= lo && x <= hi))
            .collect()
    }

    /// `[1 x C]` rows of interval minima and widths.
    pub fn bounds_rows(&self) -> (Tensor, Tensor) {
        let mins = self.intervals.iter().map(|&(lo, _)| lo as f64).collect();
        let spans = self.intervals.iter().map(|&(lo, hi)| (hi - lo) as f64).collect();
        (Tensor::row(mins), Tensor::row(spans))
    }
}

/// Standard Gumbel(0, 1) noise of shape `[rows x cols]`.
pub fn gumbel_noise(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            // open interval keeps both logs finite
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(choices: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[choices.len(), classes]);
    for (r, &c) in choices.iter().enumerate() {
        t.set(r, c, 1.0);
    }
    t
}

/// Output of the high-level selector.
#[derive(Clone, Copy, Debug)]
pub struct Selection {
    /// Softmax of the (noisy) logits divided by the temperature.
    pub soft: Var,
    /// Straight-through routing weights: hard one-hot forward, soft backward.
    pub routed: Var,
}

/// Gumbel-softmax category selection over `logits: [R x C]`.
///
/// `noise` is `None` in evaluation mode. `hard_override` replaces the argmax
/// for rows where it is `Some`.
pub fn high_level_select(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    noise: Option<&Tensor>,
    hard_override: &[Option<usize>],
) -> Result<(Selection, Vec<usize>)> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("Gumbel temperature must be positive, got {temperature}")));
    }
    let noisy = match noise {
        Some(g) => {
            let g = tape.constant(g.clone())?;
            tape.add(logits, g)?
        }
        None => logits,
    };
    let scaled = tape.scale(noisy, 1.0 / temperature)?;
    let soft = tape.softmax(scaled)?;
    let probs = tape.value(soft);
    let classes = probs.cols();
    let choices: Vec<usize> = (0..probs.rows())
        .map(|r| hard_override.get(r).copied().flatten().unwrap_or_else(|| argmax(probs.row_slice(r))))
        .collect();
    let routed = tape.straight_through(one_hot(&choices, classes), soft)?;
    Ok((Selection { soft, routed }, choices))
}

/// Candidate lengths `min_c + (max_c - min_c) * sigmoid(head_c)` for every
/// category, `[R x C]`.
pub fn candidate_lengths(tape: &mut Tape, head: Var, anchors: &ScaleAnchors) -> Result<Var> {
    if tape.value(head).cols() != anchors.categories() {
        return Err(Error::shape(
            "candidate_lengths",
            format!("head {:?} for {} categories", tape.value(head).shape(), anchors.categories()),
        ));
    }
    let (mins, spans) = anchors.bounds_rows();
    let s = tape.sigmoid(head)?;
    let spans = tape.constant(spans)?;
    let mins = tape.constant(mins)?;
    let scaled = tape.mul_row(s, spans)?;
    tape.add_row(scaled, mins)
}

/// Length executed by the selected category: `sum_c routed_c * len_c`.
///
/// The routing weights are exactly one-hot in the forward pass, so only the
/// selected head receives gradient through this product.
pub fn low_level_length(tape: &mut Tape, routed: Var, candidates: Var) -> Result<Var> {
    let picked = tape.mul(routed, candidates)?;
    tape.sum_cols(picked)
}

/// Integer step length used to move the cursor.
pub fn round_and_clip_length(len: f64, cursor: usize, horizon: usize) -> Result<usize> {
    if cursor == 0 || cursor > horizon {
        return Err(Error::Config(format!("cursor {cursor} outside horizon 1..={horizon}")));
    }
    let remaining = (horizon - cursor + 1) as f64;
    Ok(len.clamp(1.0, remaining).round() as usize)
}
