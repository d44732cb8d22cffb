//! Synthetic benchmark scenarios integrated with fixed-step RK4.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const VDP_MU: f64 = 2.0;
pub const VDP_NOISE_STD: f64 = 0.05;
pub const FHN_PULSE: f64 = 0.5;
pub const FHN_PERIOD: f64 = 50.0;
pub const FHN_PULSE_WIDTH: f64 = 2.0;
pub const OSC_DAMPING: f64 = 0.15;
pub const OSC_RESET_EVERY: usize = 2000;
pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;
/// Trajectories per cluster in the heterogeneous scenario.
pub const CLUSTER_SIZE: usize = 10;
/// RK4 substeps per sample for the Brusselator; a single 0.05 step is
/// unstable once `X^2` grows during the relaxation spikes.
pub const BRUSSELATOR_SUBSTEPS: usize = 10;

/// Fixed-step classical RK4. Row 0 is `x0`; row `i` is the state at
/// `t0 + i * dt`. `field(t, x, dxdt)` writes the derivative.
pub fn integrate_ode<F>(field: F, x0: &[f64], t0: f64, steps: usize, dt: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    integrate_ode_substeps(field, x0, t0, steps, dt, 1)
}

/// Like [`integrate_ode`] but takes `substeps` RK4 steps of `dt / substeps`
/// between consecutive output rows.
pub fn integrate_ode_substeps<F>(
    mut field: F,
    x0: &[f64],
    t0: f64,
    steps: usize,
    dt: f64,
    substeps: usize,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    let d = x0.len();
    let mut out = Vec::with_capacity(steps);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    out.push(x.clone());
    for i in 1..steps {
        let h = dt / substeps as f64;
        for j in 0..substeps {
            let t = t0 + (i - 1) as f64 * dt + j as f64 * h;
            rk4_step(&mut field, t, h, &mut x, [&mut k1, &mut k2, &mut k3, &mut k4], &mut tmp);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("integration produced a non-finite state at step {i}")));
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn rk4_step<F>(field: &mut F, t: f64, dt: f64, x: &mut [f64], k: [&mut Vec<f64>; 4], tmp: &mut [f64])
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let [k1, k2, k3, k4] = k;
    field(t, x, k1);
    for j in 0..x.len() {
        tmp[j] = x[j] + 0.5 * dt * k1[j];
    }
    field(t + 0.5 * dt, tmp, k2);
    for j in 0..x.len() {
        tmp[j] = x[j] + 0.5 * dt * k2[j];
    }
    field(t + 0.5 * dt, tmp, k3);
    for j in 0..x.len() {
        tmp[j] = x[j] + dt * k3[j];
    }
    field(t + dt, tmp, k4);
    for j in 0..x.len() {
        x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    /// 1: heterogeneous clusters, 2: driven Brusselator, 3: Lorenz z.
    pub scenario: u8,
    pub steps: usize,
    /// Defaults to 0.05, 0.05 and 0.02 for scenarios 1, 2 and 3.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Observation noise on the Van der Pol cluster.
    pub noise: bool,
    /// Drop the driver column `U` from scenario 2.
    pub hide_driver: bool,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            scenario: 1,
            steps: 20_000,
            dt: None,
            seed: 0,
            noise: true,
            hide_driver: false,
        }
    }
}

impl ScenarioSpec {
    pub fn new(scenario: u8, seed: u64) -> Self {
        ScenarioSpec {
            scenario,
            seed,
            ..Self::default()
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(match self.scenario {
            3 => 0.02,
            _ => 0.05,
        })
    }

    fn validate(&self, expected: u8) -> Result<()> {
        if self.scenario != expected {
            return Err(Error::Config(format!(
                "scenario {} passed to the generator for scenario {expected}",
                self.scenario
            )));
        }
        if self.steps == 0 || !(self.dt() > 0.0) {
            return Err(Error::Config("scenario needs steps >= 1 and dt > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    /// `[T x N]`.
    pub values: Tensor,
    /// Which state coordinate each column observes.
    pub observed: Vec<String>,
    /// Generating cluster of each column (all 0 outside scenario 1).
    pub clusters: Vec<usize>,
    pub spec: ScenarioSpec,
}

impl TrajectoryBatch {
    pub fn to_dataset(&self) -> Dataset {
        let mut d = Dataset::new(format!("scenario{}", self.spec.scenario), self.values.clone())
            .expect("generated values are finite");
        d.frequency = Some(format!("dt={}", self.spec.dt()));
        d.columns = self.observed.clone();
        d
    }

    /// Write `path` as CSV (`t` then the observed columns) and `path.json`
/// with the generator settings.
    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_dataset().write_csv(path)?;
        let sidecar = serde_json::json!({
            "spec": self.spec,
            "dt": self.spec.dt(),
            "observed": self.observed,
            "clusters": self.clusters,
        });
        let mut side = path.as_os_str().to_owned();
        side.push(".json");
        std::fs::write(side, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

pub fn generate(spec: &ScenarioSpec) -> Result<TrajectoryBatch> {
    match spec.scenario {
        1 => gen_scenario1(spec),
        2 => gen_scenario2(spec),
        3 => gen_scenario3(spec),
        s => Err(Error::Config(format!("unknown scenario {s}; expected 1, 2 or 3"))),
    }
}

fn uniform_state(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn van_der_pol(_t: f64, x: &[f64], dx: &mut [f64]) {
    dx[0] = x[1];
    dx[1] = VDP_MU * (1.0 - x[0] * x[0]) * x[1] - x[0];
}

fn fitzhugh_nagumo(t: f64, x: &[f64], dx: &mut [f64]) {
    let pulse = if t.rem_euclid(FHN_PERIOD) < FHN_PULSE_WIDTH { FHN_PULSE } else { 0.0 };
    dx[0] = x[0] - x[0].powi(3) / 3.0 - x[1] + pulse;
    dx[1] = 0.08 * (x[0] + 0.7 - 0.8 * x[1]);
}

fn damped_oscillator(_t: f64, x: &[f64], dx: &mut [f64]) {
    dx[0] = x[1];
    dx[1] = -OSC_DAMPING * x[1] - x[0];
}

/// 30 columns: Van der Pol `y1` (noisy), FitzHugh-Nagumo `v`, and damped
/// oscillator `y1` with a fresh state every [`OSC_RESET_EVERY`] steps; ten
/// independent trajectories each.
pub fn gen_scenario1(spec: &ScenarioSpec) -> Result<TrajectoryBatch> {
    spec.validate(1)?;
    let (t, dt) = (spec.steps, spec.dt());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = 3 * CLUSTER_SIZE;
    let mut values = vec![0.0; t * n];
    let mut observed = Vec::with_capacity(n);
    let noise = Normal::new(0.0, VDP_NOISE_STD).expect("valid std");

    for j in 0..CLUSTER_SIZE {
        let x0 = uniform_state(&mut rng, 2);
        let path = integrate_ode(van_der_pol, &x0, 0.0, t, dt)?;
        for (i, s) in path.iter().enumerate() {
            let eps = if spec.noise { noise.sample(&mut rng) } else { 0.0 };
            values[i * n + j] = s[0] + eps;
        }
        observed.push(format!("vdp{j}.y1"));
    }
    for j in 0..CLUSTER_SIZE {
        let x0 = uniform_state(&mut rng, 2);
        let path = integrate_ode(fitzhugh_nagumo, &x0, 0.0, t, dt)?;
        for (i, s) in path.iter().enumerate() {
            values[i * n + CLUSTER_SIZE + j] = s[0];
        }
        observed.push(format!("fhn{j}.v"));
    }
    for j in 0..CLUSTER_SIZE {
        let col = 2 * CLUSTER_SIZE + j;
        let mut start = 0;
        while start < t {
            let len = OSC_RESET_EVERY.min(t - start);
            let x0 = uniform_state(&mut rng, 2);
            let path = integrate_ode(damped_oscillator, &x0, start as f64 * dt, len, dt)?;
            for (i, s) in path.iter().enumerate() {
                values[(start + i) * n + col] = s[0];
            }
            start += len;
        }
        observed.push(format!("osc{j}.y1"));
    }
    Ok(TrajectoryBatch {
        values: Tensor::matrix(t, n, values),
        observed,
        clusters: (0..n).map(|c| c / CLUSTER_SIZE).collect(),
        spec: spec.clone(),
    })
}

/// Brusselator `(X, Y)` with `B(t) = 2.5 + 2 U(t)`, where `U` relaxes toward
/// `1 + 0.5 sin(0.1 t)` at rate 0.2. Starts at `X = Y = U = 1`.
pub fn gen_scenario2(spec: &ScenarioSpec) -> Result<TrajectoryBatch> {
    spec.validate(2)?;
    let field = |t: f64, s: &[f64], ds: &mut [f64]| {
        let (x, y, u) = (s[0], s[1], s[2]);
        let b = 2.5 + 2.0 * u;
        ds[0] = 1.0 + x * x * y - (b + 1.0) * x;
        ds[1] = b * x - x * x * y;
        ds[2] = 0.2 * (1.0 + 0.5 * (0.1 * t).sin() - u);
    };
    let path = integrate_ode_substeps(field, &[1.0, 1.0, 1.0], 0.0, spec.steps, spec.dt(), BRUSSELATOR_SUBSTEPS)?;
    let cols = if spec.hide_driver { 2 } else { 3 };
    let values = path.iter().flat_map(|s| s[..cols].to_vec()).collect();
    let observed = ["X", "Y", "U"][..cols].iter().map(|s| s.to_string()).collect();
    Ok(TrajectoryBatch {
        values: Tensor::matrix(spec.steps, cols, values),
        observed,
        clusters: vec![0; cols],
        spec: spec.clone(),
    })
}

pub fn lorenz(_t: f64, s: &[f64], ds: &mut [f64]) {
    ds[0] = LORENZ_SIGMA * (s[1] - s[0]);
    ds[1] = s[0] * (LORENZ_RHO - s[2]) - s[1];
    ds[2] = s[0] * s[1] - LORENZ_BETA * s[2];
}

/// Lorenz system from a uniform random start; only `z` is kept.
pub fn gen_scenario3(spec: &ScenarioSpec) -> Result<TrajectoryBatch> {
    spec.validate(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x0 = uniform_state(&mut rng, 3);
    let path = integrate_ode(lorenz, &x0, 0.0, spec.steps, spec.dt())?;
    Ok(TrajectoryBatch {
        values: Tensor::matrix(spec.steps, 1, path.iter().map(|s| s[2]).collect()),
        observed: vec!["z".into()],
        clusters: vec![0],
        spec: spec.clone(),
    })
}
