//! Adaptive-scheduling multi-horizon forecasting.
//!
//! A forecast is the sum of a one-shot coarse projection and a gated
//! scheduling branch. The scheduling branch walks the horizon in
//! variable-length steps chosen by a two-level controller, writes each
//! step's segment through a differentiable mask, and evolves its state with
//! a discretized controlled differential equation.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod checkpoint;
pub mod cluster;
pub mod controller;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod model;
pub mod sched;
pub mod synth;
pub mod train;

pub use controller::{scale_anchors, Category, ScaleAnchors};
pub use error::{Error, Result};
pub use grad::{AdamConfig, Gradients, ParamStore, Tape, Tensor, Var};
pub use metrics::MetricReport;
pub use model::{Ablation, ForecastOutput, LeapTs, ModelConfig};
pub use sched::{ScheduleTrace, StepRecord};
