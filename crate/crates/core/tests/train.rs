use std::collections::BTreeMap;
use std::time::Instant;

use leapts::data::{make_windows, Dataset, Split};
use leapts::grad::Tensor;
use leapts::synth::{generate, ScenarioSpec};
use leapts::train::{batch_gradients, train, TrainConfig};
use leapts::{LeapTs, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(l: usize, p: usize, n: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        lookback: l,
        horizon: p,
        variates: n,
        hidden: 8,
        summary: 4,
        control: 3,
        encoder_width: 32,
        field_width: 8,
        seed,
        ..ModelConfig::default()
    }
}

fn series(name: &str, t: usize, f: impl Fn(usize) -> f64) -> Dataset {
    Dataset::new(name, Tensor::matrix(t, 1, (0..t).map(f).collect())).unwrap()
}

#[test]
fn constant_series_is_learned_quickly() {
    let data = series("flat", 400, |_| 3.0);
    let cfg = TrainConfig { lr: 1e-2, batch_size: 16, epochs: 5, seed: 1, ..TrainConfig::default() };
    let out = train(LeapTs::new(small(24, 6, 1, 0)).unwrap(), &data, &cfg, None).unwrap();
    assert!(out.report.best_val_loss < 1e-3, "val loss {}", out.report.best_val_loss);
    assert!(out.report.test.mse < 2e-3, "test mse {}", out.report.test.mse);
}

#[test]
fn same_seed_gives_identical_curves() {
    let data = series("wave", 600, |i| (i as f64 * 0.2).sin() + 0.3 * (i as f64 * 0.05).cos());
    let cfg = TrainConfig { epochs: 3, max_batches: Some(6), seed: 9, ..TrainConfig::default() };
    let run = || train(LeapTs::new(small(32, 12, 1, 4)).unwrap(), &data, &cfg, None).unwrap();
    let (a, b) = (run(), run());
    let curve = |o: &leapts::train::TrainOutcome| o.report.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>();
    assert_eq!(curve(&a), curve(&b));
    assert_eq!(a.report.test.mse, b.report.test.mse);
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn sine_toy_is_fit_within_a_minute() {
    let started = Instant::now();
    let data = series("sine", 2000, |i| (2.0 * std::f64::consts::PI * i as f64 / 25.0).sin());
    let cfg = TrainConfig { lr: 3e-3, epochs: 10, seed: 0, ..TrainConfig::default() };
    let out = train(LeapTs::new(small(48, 12, 1, 0)).unwrap(), &data, &cfg, None).unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(out.report.test.mse < 0.05, "test mse {}", out.report.test.mse);
    assert!(secs < 60.0, "took {secs:.1}s");
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let data = series("noise", 500, |i| (i * 7919 % 101) as f64 / 50.0 - 1.0);
    let cfg = TrainConfig { lr: 1e-2, epochs: 12, patience: 1, max_batches: Some(4), ..TrainConfig::default() };
    let out = train(LeapTs::new(small(24, 6, 1, 2)).unwrap(), &data, &cfg, None).unwrap();
    let r = &out.report;
    let best = r.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_val_loss, best);
    assert!(r.epochs.iter().filter(|e| e.epoch > r.best_epoch).all(|e| e.val_loss >= r.best_val_loss));
}

fn group(name: &str) -> &str {
    name.split('.').next().unwrap()
}

#[test]
fn every_parameter_group_receives_gradient() {
    let (l, p, n) = (24, 12, 4);
    let mut model = LeapTs::new(ModelConfig { clusters: 2, ..small(l, p, n, 5) }).unwrap();
    model.set_clusters(vec![0, 1, 0, 1]).unwrap();
    assert!(!model.anchors.degenerate);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = Dataset::new("rand", Tensor::matrix(300, n, (0..300 * n).map(|_| rng.random_range(-2.0..2.0)).collect())).unwrap();
    let batch = make_windows(&data, l, p, Split::Train, 1).unwrap();
    let batch = batch.select(&(0..32).collect::<Vec<_>>());
    let (_, grads) = batch_gradients(&model, &batch, 1.0, 0).unwrap();

    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
    for name in model.params.names() {
        let g = grads.get(name).unwrap();
        let key = if name.starts_with("field.") { name.rsplit_once('.').unwrap().0.to_string() } else { group(name).to_string() };
        *norms.entry(key).or_default() += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    for expected in ["enc", "coarse", "gate", "init", "cat", "len", "seg", "sum", "ctrl", "field.0.f1", "field.0.f2", "field.0.g1", "field.0.g2", "field.1.f1", "field.1.g2"] {
        assert!(norms.get(expected).is_some_and(|&v| v > 0.0), "{expected}: {norms:?}");
    }
}

fn scenario_data(scenario: u8, steps: usize) -> Dataset {
    generate(&ScenarioSpec { steps, ..ScenarioSpec::new(scenario, 1) }).unwrap().to_dataset()
}

#[test]
fn validation_loss_drops_on_every_scenario() {
    for scenario in 1..=3u8 {
        let data = scenario_data(scenario, 3000);
        let cfg = TrainConfig { epochs: 8, max_batches: Some(12), patience: 8, ..TrainConfig::default() };
        let out = train(LeapTs::new(small(48, 12, data.variates(), 0)).unwrap(), &data, &cfg, None).unwrap();
        let e = &out.report.epochs;
        let (first, last) = (e[0].val_loss, out.report.best_val_loss);
        assert!(last <= 0.8 * first, "scenario {scenario}: {first} -> {last}");
    }
}

#[test]
fn repeated_seeds_are_stable() {
    let data = scenario_data(3, 4000);
    let mses: Vec<f64> = (0..5)
        .map(|seed| {
            let cfg = TrainConfig { epochs: 5, seed, ..TrainConfig::default() };
            let model = LeapTs::new(small(48, 12, 1, seed)).unwrap();
            train(model, &data, &cfg, None).unwrap().report.test.mse
        })
        .collect();
    let mean = mses.iter().sum::<f64>() / 5.0;
    let std = (mses.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
    assert!(std < 0.3 * mean, "{mses:?}");
}
