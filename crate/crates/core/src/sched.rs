//! The scheduling loop: masked segment writes, summary feedback, control
//! signals and the controlled-Euler state update.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{self, gumbel_noise, one_hot, ScaleAnchors};
use crate::error::{Error, Result};
use crate::grad::{sigmoid, ParamStore, Tape, Tensor, Var};

/// Plain evaluation of the write mask for one row.
pub fn soft_mask(len: f64, cursor: usize, horizon: usize, gamma: f64) -> Vec<f64> {
    (1..=horizon)
        .map(|t| {
            if t < cursor {
                0.0
            } else {
                sigmoid((len - (t - cursor) as f64 - 0.5) / gamma)
            }
        })
        .collect()
}

/// `s_bar = s * mask`, `accum' = accum + s_bar`.
pub fn write_segment(tape: &mut Tape, segment: Var, mask: Var, accum: Var) -> Result<(Var, Var)> {
    let written = tape.mul(segment, mask)?;
    let next = tape.add(accum, written)?;
    Ok((next, written))
}

/// `x W + b`.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn load(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Linear {
            w: store.load(tape, &format!("{prefix}.w"))?,
            b: store.load(tape, &format!("{prefix}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        affine(tape, x, self.w, self.b)
    }
}

/// Vector fields of one variate cluster: `F` maps `[h || u]` to a flattened
/// `[d_h x d_u]` matrix, `G` maps it to a `[d_h]` drift.
#[derive(Clone, Copy, Debug)]
pub struct FieldParams {
    pub f_hidden: Linear,
    pub f_out: Linear,
    pub g_hidden: Linear,
    pub g_out: Linear,
}

impl FieldParams {
    pub fn load(tape: &mut Tape, store: &ParamStore, cluster: usize) -> Result<Self> {
        let p = |n: &str| format!("field.{cluster}.{n}");
        Ok(FieldParams {
            f_hidden: Linear::load(tape, store, &p("f1"))?,
            f_out: Linear::load(tape, store, &p("f2"))?,
            g_hidden: Linear::load(tape, store, &p("g1"))?,
            g_out: Linear::load(tape, store, &p("g2"))?,
        })
    }

    fn eval(&self, tape: &mut Tape, input: Var) -> Result<(Var, Var)> {
        let fh = self.f_hidden.apply(tape, input)?;
        let fh = tape.tanh(fh)?;
        let f = self.f_out.apply(tape, fh)?;
        let gh = self.g_hidden.apply(tape, input)?;
        let gh = tape.tanh(gh)?;
        let g = self.g_out.apply(tape, gh)?;
        Ok((f, g))
    }
}

/// Scheduling-branch parameters loaded onto a tape.
#[derive(Clone, Debug)]
pub struct SchedParams {
    /// Category logits head; absent in single-level mode.
    pub category: Option<Linear>,
    pub length: Linear,
    pub segment_hidden: Option<Linear>,
    pub segment: Linear,
    pub summary: Linear,
    pub control: Linear,
    pub fields: Vec<FieldParams>,
}

impl SchedParams {
    pub fn load(tape: &mut Tape, store: &ParamStore, categories: usize, clusters: usize) -> Result<Self> {
        let category = if categories > 1 {
            Some(Linear::load(tape, store, "cat")?)
        } else {
            None
        };
        let segment_hidden = if store.contains("seg_hidden.w") {
            Some(Linear::load(tape, store, "seg_hidden")?)
        } else {
            None
        };
        Ok(SchedParams {
            category,
            length: Linear::load(tape, store, "len")?,
            segment_hidden,
            segment: Linear::load(tape, store, "seg")?,
            summary: Linear::load(tape, store, "sum")?,
            control: Linear::load(tape, store, "ctrl")?,
            fields: (0..clusters)
                .map(|g| FieldParams::load(tape, store, g))
                .collect::<Result<_>>()?,
        })
    }
}

/// Full-horizon segment of the routed category, `[R x P]`.
///
/// All category heads are evaluated as one `[d_h x C*P]` projection; the
/// one-hot routing weights pick each row's block.
pub fn segment_head(tape: &mut Tape, params: &SchedParams, h: Var, routed: Var, horizon: usize) -> Result<Var> {
    let input = match &params.segment_hidden {
        Some(hidden) => {
            let x = hidden.apply(tape, h)?;
            tape.tanh(x)?
        }
        None => h,
    };
    let all = params.segment.apply(tape, input)?;
    let categories = tape.value(routed).cols();
    if tape.value(all).cols() != categories * horizon {
        return Err(Error::shape(
            "segment_head",
            format!("head width {} for {categories} x {horizon}", tape.value(all).cols()),
        ));
    }
    if categories == 1 {
        return Ok(all);
    }
    let mut acc: Option<Var> = None;
    for c in 0..categories {
        let block = tape.slice(all, c * horizon, (c + 1) * horizon)?;
        let weight = tape.slice(routed, c, c + 1)?;
        let part = tape.mul_col(block, weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, part)?,
            None => part,
        });
    }
    Ok(acc.expect("at least one category"))
}

/// `c_k = tanh(W_sum s_bar + b)`.
pub fn summarize_segment(tape: &mut Tape, summary: &Linear, written: Var) -> Result<Var> {
    let x = summary.apply(tape, written)?;
    tape.tanh(x)
}

/// `u_k = tanh(W_u [rho || prev_len || prev_pi || prev_summary] + b)`.
pub fn build_control_signal(
    tape: &mut Tape,
    control: &Linear,
    remaining: Var,
    prev_len: Var,
    prev_pi: Var,
    prev_summary: Var,
) -> Result<Var> {
    let ctx = tape.concat(&[remaining, prev_len, prev_pi, prev_summary])?;
    let x = control.apply(tape, ctx)?;
    tape.tanh(x)
}

/// `du = u_k - u_{k-1}`, `dtau = clip(prev_len, tau_min, tau_max)`.
pub fn increments(tape: &mut Tape, u: Var, prev_u: Var, prev_len: Var, tau_min: f64, tau_max: f64) -> Result<(Var, Var)> {
    if !(tau_min > 0.0 && tau_min <= tau_max) {
        return Err(Error::Config(format!("invalid temporal clip bounds [{tau_min}, {tau_max}]")));
    }
    let du = tape.sub(u, prev_u)?;
    let dtau = tape.clip(prev_len, tau_min, tau_max)?;
    Ok((du, dtau))
}

/// One controlled-Euler step, `h + F(h,u) du + G(h,u) dtau`.
#[derive(Clone, Copy, Debug)]
pub struct Evolution {
    pub next: Var,
    pub control_part: Var,
    pub time_part: Var,
}

/// Evolves every row with the fields of its cluster. `row_clusters[r]` is
/// the cluster of row `r`.
pub fn evolve_state(
    tape: &mut Tape,
    fields: &[FieldParams],
    row_clusters: &[usize],
    h: Var,
    u: Var,
    du: Var,
    dtau: Var,
) -> Result<Evolution> {
    let rows = tape.value(h).rows();
    if row_clusters.len() != rows {
        return Err(Error::shape("evolve_state", format!("{} cluster ids for {rows} rows", row_clusters.len())));
    }
    let input = tape.concat(&[h, u])?;
    let (f, g) = if fields.len() == 1 {
        fields[0].eval(tape, input)?
    } else {
        let mut fs = Vec::new();
        let mut gs = Vec::new();
        for (cluster, params) in fields.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).filter(|&r| row_clusters[r] == cluster).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = tape.gather_rows(input, &idx)?;
            let (f, g) = params.eval(tape, sub)?;
            fs.push((f, idx.clone()));
            gs.push((g, idx));
        }
        (tape.scatter_rows(&fs, rows)?, tape.scatter_rows(&gs, rows)?)
    };
    let control_part = tape.row_matvec(f, du)?;
    let time_part = tape.mul_col(g, dtau)?;
    let delta = tape.add(control_part, time_part)?;
    let next = tape.add(h, delta)?;
    Ok(Evolution {
        next,
        control_part,
        time_part,
    })
}

/// An externally imposed scheduling step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOverride {
    pub category: usize,
    pub len: f64,
}

/// Everything random or discrete that one pass decided, per step.
#[derive(Clone, Debug, Default)]
pub struct Decisions {
    pub steps: Vec<DecisionStep>,
}

#[derive(Clone, Debug)]
pub struct DecisionStep {
    pub noise: Option<Tensor>,
    pub choices: Vec<usize>,
    pub soft: Tensor,
    /// Integer cursor advance per row; zero for rows already finished.
    pub advance: Vec<usize>,
}

/// How category decisions are made.
pub enum Routing<'a> {
    /// No noise: deterministic given the state.
    Eval,
    /// Fresh Gumbel noise every step.
    Sample(&'a mut ChaCha8Rng),
    /// Noise replayed from an earlier pass.
    Replay(&'a Decisions),
    /// Noise, choices and cursor moves replayed from an earlier pass, with
    /// the routing weights linearized around the recorded soft values:
    /// `hard + soft - soft_recorded`. Forward values match the recorded
    /// pass; derivatives equal those of the straight-through estimator.
    Frozen(&'a Decisions),
}

impl<'a> Routing<'a> {
    fn decisions(&self) -> Option<&'a Decisions> {
        match self {
            Routing::Replay(d) | Routing::Frozen(d) => Some(*d),
            _ => None,
        }
    }
}

/// Per-step record of one variate's schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub category: usize,
    pub soft: Vec<f64>,
    pub len_cont: f64,
    pub len_int: usize,
    pub cursor_before: usize,
    pub cursor_after: usize,
    /// `sum |dh_ctrl|`
    pub ctrl_mag: f64,
    /// `sum |dh_time|`
    pub time_mag: f64,
    pub eta_ctrl: f64,
    pub eta_time: f64,
    pub forced: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub window: usize,
    pub variate: usize,
    pub volatility: Option<f64>,
    pub steps: Vec<StepRecord>,
}

impl ScheduleTrace {
    pub fn total_len(&self) -> usize {
        self.steps.iter().map(|s| s.len_int).sum()
    }

    /// The trace as imposed steps, for replay.
    pub fn overrides(&self) -> Vec<StepOverride> {
        self.steps
            .iter()
            .map(|s| StepOverride {
                category: s.category,
                len: s.len_cont,
            })
            .collect()
    }
}

/// Static settings of one scheduling pass.
pub struct ScheduleSpec<'a> {
    pub anchors: &'a ScaleAnchors,
    pub horizon: usize,
    pub mask_temperature: f64,
    pub gumbel_temperature: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub max_steps: usize,
    pub summary_dim: usize,
    pub control_dim: usize,
    /// Cluster id of each row.
    pub row_clusters: &'a [usize],
    /// `(window, variate)` of each row, for traces.
    pub row_ids: &'a [(usize, usize)],
}

pub struct ScheduleOutput {
    pub forecast: Var,
    pub traces: Vec<ScheduleTrace>,
    pub decisions: Option<Decisions>,
    /// Per-step values, when recorded.
    pub states: Vec<StepState>,
}

/// Values of one scheduling step across all rows.
#[derive(Clone, Debug)]
pub struct StepState {
    pub h: Tensor,
    pub control_part: Tensor,
    pub time_part: Tensor,
    pub next: Tensor,
    /// Masked segment added to the forecast, `[R x P]`.
    pub written: Tensor,
}

/// Options that do not affect the pass's parameters.
#[derive(Default)]
pub struct PassControl<'a> {
    /// Imposed steps per row; rows beyond their list fall back to learned decisions.
    pub overrides: Option<&'a [Vec<StepOverride>]>,
    pub record_decisions: bool,
    pub record_states: bool,
}

/// Runs the scheduling loop for every row of `h0: [R x d_h]`.
pub fn run_schedule(
    tape: &mut Tape,
    params: &SchedParams,
    spec: &ScheduleSpec<'_>,
    h0: Var,
    mut routing: Routing<'_>,
    control: &PassControl<'_>,
) -> Result<ScheduleOutput> {
    let rows = tape.value(h0).rows();
    let p = spec.horizon;
    let categories = spec.anchors.categories();
    if spec.row_clusters.len() != rows || spec.row_ids.len() != rows {
        return Err(Error::shape("run_schedule", "row metadata does not match state rows"));
    }
    if spec.max_steps == 0 {
        return Err(Error::Config("max_steps must be at least 1".into()));
    }
    let (mins, spans) = spec.anchors.bounds_rows();
    let mins_row = tape.constant(mins)?;
    let spans_row = tape.constant(spans)?;

    let mut h = h0;
    let mut cursor = vec![1usize; rows];
    let mut accum = tape.constant(Tensor::zeros(&[rows, p]))?;
    let mut prev_u = tape.constant(Tensor::zeros(&[rows, spec.control_dim]))?;
    let mut prev_pi = tape.constant(Tensor::full(&[rows, categories], 1.0 / categories as f64))?;
    let mut prev_summary = tape.constant(Tensor::zeros(&[rows, spec.summary_dim]))?;
    let mut prev_len = tape.constant(Tensor::zeros(&[rows, 1]))?;

    let mut traces: Vec<ScheduleTrace> = spec
        .row_ids
        .iter()
        .map(|&(window, variate)| ScheduleTrace {
            window,
            variate,
            ..ScheduleTrace::default()
        })
        .collect();
    let mut recorded = control.record_decisions.then(Decisions::default);
    let mut states = Vec::new();

    let mut k = 0usize;
    loop {
        let active: Vec<bool> = cursor.iter().map(|&q| q <= p).collect();
        if !active.iter().any(|&a| a) {
            break;
        }
        let replayed = routing.decisions().map(|d| d.steps.get(k));
        if let Some(None) = replayed {
            return Err(Error::Config(format!("replayed decisions end before step {}", k + 1)));
        }
        let replayed = replayed.flatten();
        let forced = k >= spec.max_steps;

        // imposed (category, length) per row for this step
        let imposed: Vec<Option<StepOverride>> = (0..rows)
            .map(|r| {
                if !active[r] {
                    return None;
                }
                if forced {
                    return Some(StepOverride {
                        category: spec.anchors.longest(),
                        len: (p - cursor[r] + 1) as f64,
                    });
                }
                control.overrides.and_then(|o| o.get(r)).and_then(|seq| seq.get(k)).copied()
            })
            .collect();
        let mut hard_override: Vec<Option<usize>> = imposed.iter().map(|o| o.map(|s| s.category)).collect();
        if let (Routing::Frozen(_), Some(step)) = (&routing, replayed) {
            hard_override = step.choices.iter().map(|&c| Some(c)).collect();
        }
        if let Some(bad) = hard_override.iter().flatten().find(|&&c| c >= categories) {
            return Err(Error::Config(format!("category {bad} out of range for {categories} categories")));
        }

        // high level
        let noise = match &mut routing {
            Routing::Eval => None,
            Routing::Sample(rng) if categories > 1 => Some(gumbel_noise(*rng, rows, categories)),
            Routing::Sample(_) => None,
            Routing::Replay(_) | Routing::Frozen(_) => replayed.and_then(|s| s.noise.clone()),
        };
        let (soft, routed, choices) = match &params.category {
            Some(cat) => {
                let logits = cat.apply(tape, h)?;
                let (sel, choices) = controller::high_level_select(
                    tape,
                    logits,
                    spec.gumbel_temperature,
                    noise.as_ref(),
                    &hard_override,
                )?;
                let routed = match (&routing, replayed) {
                    (Routing::Frozen(_), Some(step)) => {
                        let mut offset = one_hot(&choices, categories);
                        for (o, s) in offset.data_mut().iter_mut().zip(step.soft.data()) {
                            *o -= s;
                        }
                        let offset = tape.constant(offset)?;
                        tape.add(offset, sel.soft)?
                    }
                    _ => sel.routed,
                };
                (sel.soft, routed, choices)
            }
            None => {
                let ones = tape.constant(Tensor::full(&[rows, 1], 1.0))?;
                (ones, ones, vec![0; rows])
            }
        };

        // low level
        let head = params.length.apply(tape, h)?;
        let candidates = {
            let s = tape.sigmoid(head)?;
            let scaled = tape.mul_row(s, spans_row)?;
            tape.add_row(scaled, mins_row)?
        };
        let mut len = controller::low_level_length(tape, routed, candidates)?;
        if imposed.iter().any(Option::is_some) {
            let keep: Vec<f64> = imposed.iter().map(|o| if o.is_some() { 0.0 } else { 1.0 }).collect();
            let fixed: Vec<f64> = imposed.iter().map(|o| o.map_or(0.0, |s| s.len)).collect();
            let keep = tape.constant(Tensor::column(keep))?;
            let fixed = tape.constant(Tensor::column(fixed))?;
            let kept = tape.mul(len, keep)?;
            len = tape.add(kept, fixed)?;
        }

        // segment write
        let segment = segment_head(tape, params, h, routed, p)?;
        let mask = tape.soft_mask(len, &cursor, p, spec.mask_temperature)?;
        let (next_accum, written) = write_segment(tape, segment, mask, accum)?;
        accum = next_accum;
        let summary = summarize_segment(tape, &params.summary, written)?;

        // state evolution, driven by the previous step's context
        let remaining: Vec<f64> = cursor
            .iter()
            .map(|&q| if q <= p { (p - q + 1) as f64 / p as f64 } else { 0.0 })
            .collect();
        let remaining = tape.constant(Tensor::column(remaining))?;
        let u = build_control_signal(tape, &params.control, remaining, prev_len, prev_pi, prev_summary)?;
        let (du, dtau) = increments(tape, u, prev_u, prev_len, spec.tau_min, spec.tau_max)?;
        let evo = evolve_state(tape, &params.fields, spec.row_clusters, h, u, du, dtau)?;

        // cursor advance
        let len_vals = tape.value(len).data().to_vec();
        let advance: Vec<usize> = match replayed {
            Some(step) if matches!(routing, Routing::Frozen(_)) => step.advance.clone(),
            _ => (0..rows)
                .map(|r| {
                    if active[r] {
                        controller::round_and_clip_length(len_vals[r], cursor[r], p)
                    } else {
                        Ok(0)
                    }
                })
                .collect::<Result<_>>()?,
        };

        let soft_vals = tape.value(soft).clone();
        let ctrl_vals = tape.value(evo.control_part);
        let time_vals = tape.value(evo.time_part);
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let ctrl_mag: f64 = ctrl_vals.row_slice(r).iter().map(|v| v.abs()).sum();
            let time_mag: f64 = time_vals.row_slice(r).iter().map(|v| v.abs()).sum();
            let (eta_ctrl, eta_time) = crate::diagnostics::decompose_magnitudes(ctrl_mag, time_mag, crate::diagnostics::RATIO_EPS);
            traces[r].steps.push(StepRecord {
                step: k + 1,
                category: choices[r],
                soft: soft_vals.row_slice(r).to_vec(),
                len_cont: len_vals[r],
                len_int: advance[r],
                cursor_before: cursor[r],
                cursor_after: cursor[r] + advance[r],
                ctrl_mag,
                time_mag,
                eta_ctrl,
                eta_time,
                forced,
            });
        }
        if control.record_states {
            states.push(StepState {
                h: tape.value(h).clone(),
                control_part: tape.value(evo.control_part).clone(),
                time_part: tape.value(evo.time_part).clone(),
                next: tape.value(evo.next).clone(),
                written: tape.value(written).clone(),
            });
        }
        if let Some(rec) = recorded.as_mut() {
            rec.steps.push(DecisionStep {
                noise: noise.clone(),
                choices: choices.clone(),
                soft: soft_vals,
                advance: advance.clone(),
            });
        }

        for r in 0..rows {
            cursor[r] += advance[r];
        }
        h = evo.next;
        prev_u = u;
        prev_pi = soft;
        prev_summary = summary;
        prev_len = tape.scale(len, 1.0 / p as f64)?;
        k += 1;
        if k > spec.max_steps + 1 {
            return Err(Error::Numeric("scheduling loop failed to cover the horizon".into()));
        }
    }

    Ok(ScheduleOutput {
        forecast: accum,
        traces,
        decisions: recorded,
        states,
    })
}
