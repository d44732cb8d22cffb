use leapts::synth::{gen_scenario1, gen_scenario2, gen_scenario3, generate, integrate_ode, lorenz, ScenarioSpec, CLUSTER_SIZE};

fn short(scenario: u8, steps: usize, seed: u64) -> ScenarioSpec {
    ScenarioSpec { steps, ..ScenarioSpec::new(scenario, seed) }
}

#[test]
fn constant_field_stays_put() {
    let path = integrate_ode(|_, _, d| d[0] = 0.0, &[1.0], 0.0, 50, 0.1).unwrap();
    assert!(path.iter().all(|s| s[0] == 1.0));
}

#[test]
fn exponential_decay_matches_closed_form() {
    let path = integrate_ode(|_, x, d| d[0] = -x[0], &[1.0], 0.0, 101, 0.01).unwrap();
    assert!((path[100][0] - (-1.0f64).exp()).abs() < 1e-6);
}

#[test]
fn oscillator_energy_is_conserved() {
    let path = integrate_ode(|_, x, d| { d[0] = x[1]; d[1] = -x[0]; }, &[1.0, 0.0], 0.0, 10_001, 0.02).unwrap();
    let energy = |s: &[f64]| 0.5 * (s[0] * s[0] + s[1] * s[1]);
    let drift = (energy(&path[10_000]) - energy(&path[0])).abs() / energy(&path[0]);
    assert!(drift < 1e-4, "relative drift {drift}");
}

#[test]
fn blow_up_names_the_step() {
    let err = integrate_ode(|_, x, d| d[0] = x[0] * x[0], &[1.0], 0.0, 1000, 0.5).unwrap_err();
    assert!(err.to_string().contains("step"));
}

#[test]
fn invalid_step_size() {
    assert!(integrate_ode(|_, _, d| d[0] = 0.0, &[0.0], 0.0, 3, 0.0).is_err());
}

#[test]
fn default_shapes() {
    assert_eq!(gen_scenario1(&ScenarioSpec::new(1, 0)).unwrap().values.shape(), &[20_000, 30]);
    assert_eq!(gen_scenario2(&ScenarioSpec::new(2, 0)).unwrap().values.shape(), &[20_000, 3]);
    assert_eq!(gen_scenario3(&ScenarioSpec::new(3, 0)).unwrap().values.shape(), &[20_000, 1]);
    let hidden = ScenarioSpec { hide_driver: true, ..ScenarioSpec::new(2, 0) };
    assert_eq!(generate(&hidden).unwrap().values.shape(), &[20_000, 2]);
}

#[test]
fn generators_are_deterministic() {
    for s in 1..=3 {
        let a = generate(&short(s, 3000, 11)).unwrap();
        let b = generate(&short(s, 3000, 11)).unwrap();
        assert_eq!(a.values, b.values);
        assert!(a.values.is_finite());
    }
    let a = generate(&short(1, 100, 1)).unwrap();
    let b = generate(&short(1, 100, 2)).unwrap();
    assert_ne!(a.values, b.values);
}

#[test]
fn wrong_scenario_is_rejected() {
    assert!(gen_scenario1(&ScenarioSpec::new(2, 0)).is_err());
    assert!(generate(&ScenarioSpec::new(4, 0)).is_err());
}

#[test]
fn van_der_pol_reaches_limit_cycle() {
    let spec = ScenarioSpec { noise: false, ..short(1, 4000, 3) };
    let data = gen_scenario1(&spec).unwrap();
    let after = (50.0 / spec.dt()) as usize;
    for j in 0..CLUSTER_SIZE {
        let peak = (after..4000).map(|i| data.values.get(i, j).abs()).fold(0.0, f64::max);
        assert!((1.5..=2.5).contains(&peak), "column {j}: {peak}");
    }
}

#[test]
fn oscillator_resets_every_2000_steps() {
    // y'' + 0.15 y' + y = 0 holds on smooth stretches; the residual of its
    // central-difference form spikes only where a triple straddles a reset
    let spec = short(1, 8000, 5);
    let dt = spec.dt();
    let data = gen_scenario1(&spec).unwrap();
    for j in 2 * CLUSTER_SIZE..3 * CLUSTER_SIZE {
        let y: Vec<f64> = (0..8000).map(|i| data.values.get(i, j)).collect();
        let residual = |i: usize| {
            ((y[i + 1] - 2.0 * y[i] + y[i - 1]) / (dt * dt) + 0.15 * (y[i + 1] - y[i - 1]) / (2.0 * dt) + y[i]).abs()
        };
        for i in 1..7999 {
            let straddles = (i + 1) % 2000 == 0 || i % 2000 == 0;
            if !straddles {
                assert!(residual(i) < 1e-2, "column {j}, step {i}: {}", residual(i));
            }
        }
        for reset in [2000, 4000, 6000] {
            assert!(residual(reset - 1).max(residual(reset)) > 1.0, "column {j} at {reset}");
        }
    }
}

#[test]
fn driver_tracks_its_target() {
    let spec = short(2, 20_000, 0);
    let data = gen_scenario2(&spec).unwrap();
    let amp = 0.1 / 0.05f64.sqrt();
    let phase = 0.5f64.atan();
    for i in (0..20_000).step_by(97) {
        let t = i as f64 * spec.dt();
        let closed = 1.0 + amp * (0.1 * t - phase).sin() + amp * phase.sin() * (-0.2 * t).exp();
        assert!((data.values.get(i, 2) - closed).abs() < 1e-6, "t={t}");
        if t > 30.0 {
            let u = data.values.get(i, 2);
            assert!((0.5 - 1e-3..=1.5 + 1e-3).contains(&u));
        }
        assert!(data.values.get(i, 0) > 0.0 && data.values.get(i, 1) > 0.0);
    }
}

#[test]
fn lorenz_z_stays_on_the_attractor() {
    let data = gen_scenario3(&ScenarioSpec::new(3, 4)).unwrap();
    for i in 100..20_000 {
        let z = data.values.get(i, 0);
        assert!(z > 0.0 && z < 60.0, "step {i}: {z}");
    }
}

#[test]
fn lorenz_is_sensitive_to_initial_conditions() {
    let a = integrate_ode(lorenz, &[1.0, 1.0, 1.0], 0.0, 20_000, 0.02).unwrap();
    let b = integrate_ode(lorenz, &[1.0 + 1e-8, 1.0, 1.0], 0.0, 20_000, 0.02).unwrap();
    let gap = a.iter().zip(&b).map(|(x, y)| (x[2] - y[2]).abs()).fold(0.0, f64::max);
    assert!(gap > 1.0);
}

#[test]
fn csv_and_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s3.csv");
    let batch = generate(&short(3, 200, 9)).unwrap();
    batch.write(&path).unwrap();
    let back = leapts::data::load_csv(&path).unwrap();
    assert_eq!(back.values, batch.values);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("s3.csv.json")).unwrap()).unwrap();
    assert_eq!(side["spec"]["scenario"], 3);
    assert_eq!(side["dt"], 0.02);
}
