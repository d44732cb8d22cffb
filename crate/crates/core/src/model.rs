//! Model configuration, parameter layout, encoder, coarse head and gate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{scale_anchors, ScaleAnchors};
use crate::error::{Error, Result};
use crate::grad::{glorot, ParamStore, Tape, Tensor, Var};
use crate::sched::{self, Decisions, Linear, PassControl, Routing, ScheduleSpec, ScheduleTrace, SchedParams, StepOverride, StepState};

/// Model variants used for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Coarse branch only; the gate is closed.
    NoSched,
    /// One length head over `[1, P]`, no category routing.
    NoHighLevel,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "no_sched" => Ok(Ablation::NoSched),
            "no_high_level" => Ok(Ablation::NoHighLevel),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::NoSched => "no_sched",
            Ablation::NoHighLevel => "no_high_level",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub variates: usize,
    /// Controller state width `d_h`.
    pub hidden: usize,
    /// Latent width `d_z`; defaults to `hidden`.
    pub latent: Option<usize>,
    /// Summary width `d_c`.
    pub summary: usize,
    /// Control signal width `d_u`.
    pub control: usize,
    pub encoder_layers: usize,
    pub encoder_width: usize,
    /// Hidden width of the segment heads; 0 for linear heads.
    pub head_hidden: usize,
    /// Hidden width of the vector-field networks.
    pub field_width: usize,
    /// Number of variate clusters `G`.
    pub clusters: usize,
    /// Write-mask temperature `gamma`.
    pub mask_temperature: f64,
    /// Gumbel-softmax temperature.
    pub gumbel_temperature: f64,
    /// Anneal target for the Gumbel temperature, reached at the last epoch.
    pub gumbel_final_temperature: Option<f64>,
    /// Lower clip of the temporal increment; defaults to `1/P`.
    pub tau_min: Option<f64>,
    pub tau_max: f64,
    /// Scheduling-loop cap; defaults to `P`.
    pub max_steps: Option<usize>,
    /// Standardize each look-back row and invert on the output.
    pub window_norm: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            lookback: 96,
            horizon: 24,
            variates: 1,
            hidden: 16,
            latent: None,
            summary: 8,
            control: 4,
            encoder_layers: 2,
            encoder_width: 64,
            head_hidden: 0,
            field_width: 16,
            clusters: 1,
            mask_temperature: 0.25,
            gumbel_temperature: 1.0,
            gumbel_final_temperature: None,
            tau_min: None,
            tau_max: 1.0,
            max_steps: None,
            window_norm: false,
            ablation: Ablation::None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.latent.unwrap_or(self.hidden)
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min.unwrap_or(1.0 / self.horizon as f64)
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or(self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.lookback == 0 || self.horizon == 0 || self.variates == 0 {
            return fail(format!(
                "L, P, N must be positive (L={}, P={}, N={})",
                self.lookback, self.horizon, self.variates
            ));
        }
        if self.hidden == 0 || self.latent_dim() == 0 || self.summary == 0 || self.control == 0 {
            return fail("hidden, latent, summary and control widths must be positive".into());
        }
        if self.encoder_layers == 0 || self.encoder_width == 0 || self.field_width == 0 {
            return fail("encoder and field networks need at least one unit".into());
        }
        if self.clusters == 0 || self.clusters > self.variates {
            return fail(format!("cluster count {} outside 1..={}", self.clusters, self.variates));
        }
        if !(self.mask_temperature > 0.0) {
            return fail(format!("mask temperature must be positive, got {}", self.mask_temperature));
        }
        if !(self.gumbel_temperature > 0.0) || self.gumbel_final_temperature.is_some_and(|t| !(t > 0.0)) {
            return fail("Gumbel temperatures must be positive".into());
        }
        let tau_min = self.tau_min();
        if !(tau_min > 0.0 && tau_min <= self.tau_max) {
            return fail(format!("need 0 < tau_min <= tau_max, got [{tau_min}, {}]", self.tau_max));
        }
        if self.max_steps() == 0 {
            return fail("max_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn anchors(&self) -> Result<ScaleAnchors> {
        match self.ablation {
            Ablation::NoHighLevel => Ok(ScaleAnchors::single(self.horizon)),
            _ => scale_anchors(self.lookback, self.horizon),
        }
    }
}

/// Result of one forward pass in row layout: row `b * N + n` is variate `n`
/// of window `b`.
pub struct ForecastOutput {
    pub fused: Var,
    pub coarse: Var,
    pub sched: Option<Var>,
    pub alpha: Option<Var>,
    pub traces: Vec<ScheduleTrace>,
    pub decisions: Option<Decisions>,
    pub states: Vec<StepState>,
    pub batch: usize,
}

#[derive(Clone, Debug)]
pub struct LeapTs {
    pub config: ModelConfig,
    pub anchors: ScaleAnchors,
    /// Cluster id of each variate.
    pub clusters: Vec<usize>,
    pub params: ParamStore,
    /// Current Gumbel temperature (annealed during training).
    pub gumbel_temperature: f64,
}

fn insert_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    let mut w = glorot(rng, fan_in, fan_out);
    for v in w.data_mut() {
        *v *= gain;
    }
    store.insert(format!("{name}.w"), w);
    store.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
}

impl LeapTs {
    /// Fresh model with seeded Glorot weights and zero biases. Variates are
    /// assigned to clusters in contiguous blocks until [`LeapTs::set_clusters`]
    /// is called.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let anchors = config.anchors()?;
        let n = config.variates;
        let g = config.clusters;
        let clusters = (0..n).map(|i| i * g / n).collect();
        let params = Self::init_params(&config, &anchors)?;
        Ok(LeapTs {
            gumbel_temperature: config.gumbel_temperature,
            config,
            anchors,
            clusters,
            params,
        })
    }

    fn init_params(cfg: &ModelConfig, anchors: &ScaleAnchors) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (l, p) = (cfg.lookback, cfg.horizon);
        let (dz, dh, dc, du) = (cfg.latent_dim(), cfg.hidden, cfg.summary, cfg.control);

        let mut fan_in = l;
        for i in 0..cfg.encoder_layers {
            let out = if i + 1 == cfg.encoder_layers { dz } else { cfg.encoder_width };
            insert_linear(&mut store, &mut rng, &format!("enc.{i}"), fan_in, out, 1.0);
            fan_in = out;
        }
        insert_linear(&mut store, &mut rng, "coarse", dz, p, 1.0);
        if cfg.ablation == Ablation::NoSched {
            return Ok(store);
        }
        store.insert("gate.logit", Tensor::scalar(0.0));
        insert_linear(&mut store, &mut rng, "init", dz, dh, 1.0);
        let c = anchors.categories();
        if c > 1 {
            insert_linear(&mut store, &mut rng, "cat", dh, c, 1.0);
        }
        insert_linear(&mut store, &mut rng, "len", dh, c, 1.0);
        if cfg.head_hidden > 0 {
            insert_linear(&mut store, &mut rng, "seg_hidden", dh, cfg.head_hidden, 1.0);
            insert_linear(&mut store, &mut rng, "seg", cfg.head_hidden, c * p, 1.0);
        } else {
            insert_linear(&mut store, &mut rng, "seg", dh, c * p, 1.0);
        }
        insert_linear(&mut store, &mut rng, "sum", p, dc, 1.0);
        insert_linear(&mut store, &mut rng, "ctrl", 2 + c + dc, du, 1.0);
        for g in 0..cfg.clusters {
            let w = cfg.field_width;
            insert_linear(&mut store, &mut rng, &format!("field.{g}.f1"), dh + du, w, 1.0);
            insert_linear(&mut store, &mut rng, &format!("field.{g}.f2"), w, dh * du, 0.1);
            insert_linear(&mut store, &mut rng, &format!("field.{g}.g1"), dh + du, w, 1.0);
            insert_linear(&mut store, &mut rng, &format!("field.{g}.g2"), w, dh, 0.1);
        }
        Ok(store)
    }

    pub fn set_clusters(&mut self, assignment: Vec<usize>) -> Result<()> {
        if assignment.len() != self.config.variates || assignment.iter().any(|&g| g >= self.config.clusters) {
            return Err(Error::Config(format!(
                "cluster assignment {assignment:?} invalid for N={} G={}",
                self.config.variates, self.config.clusters
            )));
        }
        self.clusters = assignment;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// The variant `flag` of this model. Parameters whose name and shape
    /// survive the change are copied; the rest are freshly initialized.
    pub fn ablate(&self, flag: Ablation) -> Result<LeapTs> {
        let mut cfg = self.config.clone();
        cfg.ablation = flag;
        let mut out = LeapTs::new(cfg)?;
        out.clusters = self.clusters.clone();
        let names: Vec<String> = out.params.names().map(str::to_string).collect();
        for name in names {
            if let Ok(src) = self.params.get(&name) {
                if src.shape() == out.params.get(&name)?.shape() {
                    *out.params.get_mut(&name)? = src.clone();
                }
            }
        }
        Ok(out)
    }

    fn check_window(&self, inputs: &Tensor) -> Result<usize> {
        let s = inputs.shape();
        let (l, n) = (self.config.lookback, self.config.variates);
        let ok = match s.len() {
            2 => s[0] == l && s[1] == n,
            3 => s[1] == l && s[2] == n,
            _ => false,
        };
        if !ok {
            return Err(Error::shape("encode", format!("input {s:?}, expected [B, {l}, {n}]")));
        }
        if !inputs.is_finite() {
            return Err(Error::Data("non-finite values in input window".into()));
        }
        Ok(if s.len() == 2 { 1 } else { s[0] })
    }

    /// Per-variate encoding `Z0: [N x d_z]` of one `[L x N]` window.
    pub fn encode(&self, window: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let rows = windows_to_rows(window, self.config.lookback, self.config.variates)?;
        let x = tape.constant(rows)?;
        let z = self.encode_rows(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Encoder over `[R x L]` rows.
    pub fn encode_rows(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.config.encoder_layers {
            let layer = Linear::load(tape, &self.params, &format!("enc.{i}"))?;
            h = layer.apply(tape, h)?;
            if i + 1 < self.config.encoder_layers {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Linear projection `d_z -> P` per row.
    pub fn coarse_forecast(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let head = Linear::load(tape, &self.params, "coarse")?;
        head.apply(tape, z)
    }

    /// `H_1 = tanh(Z0 W_init + b)`.
    pub fn init_controller_state(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let init = Linear::load(tape, &self.params, "init")?;
        let h = init.apply(tape, z)?;
        tape.tanh(h)
    }

    /// Full forward pass over `inputs: [B x L x N]` (or a single `[L x N]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        inputs: &Tensor,
        routing: Routing<'_>,
        control: &PassControl<'_>,
    ) -> Result<ForecastOutput> {
        let batch = self.check_window(inputs)?;
        let (l, n, p) = (self.config.lookback, self.config.variates, self.config.horizon);
        let mut rows = windows_to_rows(inputs, l, n)?;
        let norm = if self.config.window_norm {
            Some(crate::data::standardize_rows(&mut rows))
        } else {
            None
        };
        let x = tape.constant(rows)?;
        let z = self.encode_rows(tape, x)?;
        let coarse = self.coarse_forecast(tape, z)?;

        let (mut fused, sched, alpha, traces, decisions, states) = if self.config.ablation == Ablation::NoSched {
            (coarse, None, None, Vec::new(), None, Vec::new())
        } else {
            let h0 = self.init_controller_state(tape, z)?;
            let params = SchedParams::load(tape, &self.params, self.anchors.categories(), self.config.clusters)?;
            let row_ids: Vec<(usize, usize)> = (0..batch * n).map(|r| (r / n, r % n)).collect();
            let row_clusters: Vec<usize> = (0..batch * n).map(|r| self.clusters[r % n]).collect();
            let spec = ScheduleSpec {
                anchors: &self.anchors,
                horizon: p,
                mask_temperature: self.config.mask_temperature,
                gumbel_temperature: self.gumbel_temperature,
                tau_min: self.config.tau_min(),
                tau_max: self.config.tau_max,
                max_steps: self.config.max_steps(),
                summary_dim: self.config.summary,
                control_dim: self.config.control,
                row_clusters: &row_clusters,
                row_ids: &row_ids,
            };
            let out = sched::run_schedule(tape, &params, &spec, h0, routing, control)?;
            let logit = self.params.load(tape, "gate.logit")?;
            let alpha = tape.sigmoid(logit)?;
            let fused = fuse(tape, coarse, out.forecast, alpha)?;
            (fused, Some(out.forecast), Some(alpha), out.traces, out.decisions, out.states)
        };

        if let Some((mean, std)) = norm {
            let s = tape.constant(Tensor::column(std))?;
            let scaled = tape.mul_col(fused, s)?;
            let shift = Tensor::matrix(batch * n, p, mean.iter().flat_map(|&m| std::iter::repeat_n(m, p)).collect());
            let shift = tape.constant(shift)?;
            fused = tape.add(scaled, shift)?;
        }

        Ok(ForecastOutput {
            fused,
            coarse,
            sched,
            alpha,
            traces,
            decisions,
            states,
            batch,
        })
    }

    /// Deterministic forecast `[B x P x N]` without recording gradients.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.predict_with(inputs, None)?.0)
    }

    /// Evaluation-mode forecast and schedule traces, optionally with imposed
    /// `(category, length)` steps per row `window * N + variate`.
    pub fn predict_with(
        &self,
        inputs: &Tensor,
        overrides: Option<&[Vec<StepOverride>]>,
    ) -> Result<(Tensor, Vec<ScheduleTrace>)> {
        let mut tape = Tape::inference();
        let control = PassControl {
            overrides,
            ..PassControl::default()
        };
        let out = self.forward(&mut tape, inputs, Routing::Eval, &control)?;
        let pred = rows_to_windows(tape.value(out.fused), out.batch, self.config.variates)?;
        Ok((pred, out.traces))
    }
}

/// `fused = coarse + alpha * sched` with `alpha = sigmoid(logit)` already applied.
pub fn fuse(tape: &mut Tape, coarse: Var, sched: Var, alpha: Var) -> Result<Var> {
    if tape.value(coarse).shape() != tape.value(sched).shape() {
        return Err(Error::shape(
            "fuse",
            format!("{:?} vs {:?}", tape.value(coarse).shape(), tape.value(sched).shape()),
        ));
    }
    let gated = tape.mul_scalar(sched, alpha)?;
    tape.add(coarse, gated)
}

/// `[B x T x N]` (or `[T x N]`) into `[B*N x T]` rows, one per variate.
pub fn windows_to_rows(x: &Tensor, t: usize, n: usize) -> Result<Tensor> {
    if !x.len().is_multiple_of(t * n) || x.cols() != n {
        return Err(Error::shape("windows_to_rows", format!("{:?} with T={t}, N={n}", x.shape())));
    }
    let b = x.len() / (t * n);
    let d = x.data();
    let mut out = Vec::with_capacity(x.len());
    for w in 0..b {
        for v in 0..n {
            for s in 0..t {
                out.push(d[w * t * n + s * n + v]);
            }
        }
    }
    Ok(Tensor::matrix(b * n, t, out))
}

/// Inverse of [`windows_to_rows`]: `[B*N x T]` into `[B x T x N]`.
pub fn rows_to_windows(rows: &Tensor, b: usize, n: usize) -> Result<Tensor> {
    if rows.rows() != b * n {
        return Err(Error::shape("rows_to_windows", format!("{:?} for B={b}, N={n}", rows.shape())));
    }
    let t = rows.cols();
    let mut out = vec![0.0; rows.len()];
    for w in 0..b {
        for v in 0..n {
            for s in 0..t {
                out[w * t * n + s * n + v] = rows.get(w * n + v, s);
            }
        }
    }
    Tensor::new(vec![b, t, n], out)
}
