use leapts::checkpoint::{read_checkpoint, write_checkpoint};
use leapts::data::Scaler;
use leapts::grad::{Tape, Tensor};
use leapts::model::{fuse, rows_to_windows, windows_to_rows};
use leapts::sched::{PassControl, Routing};
use leapts::{Ablation, Error, LeapTs, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(l: usize, p: usize, n: usize) -> ModelConfig {
    ModelConfig {
        lookback: l,
        horizon: p,
        variates: n,
        hidden: 6,
        summary: 3,
        control: 2,
        encoder_width: 10,
        field_width: 5,
        ..ModelConfig::default()
    }
}

fn window(rng: &mut ChaCha8Rng, l: usize, n: usize) -> Tensor {
    Tensor::matrix(l, n, (0..l * n).map(|_| rng.random_range(-3.0..3.0)).collect())
}

#[test]
fn encoder_output_shape() {
    let model = LeapTs::new(config(96, 24, 7)).unwrap();
    let z = model.encode(&Tensor::zeros(&[96, 7])).unwrap();
    assert_eq!(z.shape(), &[7, 6]);
    // zero input, zero biases: every row is the same
    for v in 1..7 {
        assert_eq!(z.row_slice(v), z.row_slice(0));
    }
}

#[test]
fn encoder_rejects_bad_windows() {
    let model = LeapTs::new(config(8, 4, 2)).unwrap();
    assert!(matches!(model.encode(&Tensor::zeros(&[7, 2])), Err(Error::Shape { .. })));
    let mut bad = Tensor::zeros(&[8, 2]);
    bad.set(3, 1, f64::NAN);
    assert!(matches!(model.predict(&bad), Err(Error::Data(_))));
}

#[test]
fn duplicated_variates_encode_identically() {
    let model = LeapTs::new(config(12, 4, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let col: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::matrix(12, 2, col.iter().flat_map(|&v| [v, v]).collect());
    let z = model.encode(&x).unwrap();
    assert_eq!(z.row_slice(0), z.row_slice(1));
}

#[test]
fn permuting_variates_permutes_encodings() {
    let model = LeapTs::new(config(10, 4, 3)).unwrap();
    let x = window(&mut ChaCha8Rng::seed_from_u64(2), 10, 3);
    let perm = [2, 0, 1];
    let mut y = Tensor::zeros(&[10, 3]);
    for t in 0..10 {
        for (j, &src) in perm.iter().enumerate() {
            y.set(t, j, x.get(t, src));
        }
    }
    let (zx, zy) = (model.encode(&x).unwrap(), model.encode(&y).unwrap());
    for (j, &src) in perm.iter().enumerate() {
        assert_eq!(zy.row_slice(j), zx.row_slice(src));
    }
}

#[test]
fn coarse_head_is_linear_without_bias() {
    let model = LeapTs::new(config(8, 60, 7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::matrix(7, 6, (0..42).map(|_| rng.random_range(-1.0..1.0)).collect());
    let mut tape = Tape::inference();
    let a = tape.constant(z.clone()).unwrap();
    let b = tape.constant(z.map(|v| 2.0 * v)).unwrap();
    let zero = tape.constant(Tensor::zeros(&[7, 6])).unwrap();
    let (ya, yb, y0) = (
        model.coarse_forecast(&mut tape, a).unwrap(),
        model.coarse_forecast(&mut tape, b).unwrap(),
        model.coarse_forecast(&mut tape, zero).unwrap(),
    );
    assert_eq!(tape.value(ya).shape(), &[7, 60]);
    assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
        assert!((2.0 * u - v).abs() < 1e-12);
    }
}

#[test]
fn fuse_hand_example() {
    let mut tape = Tape::inference();
    let c = tape.constant(Tensor::from_rows(&[&[1.0, 1.0]])).unwrap();
    let s = tape.constant(Tensor::from_rows(&[&[2.0, 2.0]])).unwrap();
    let logit = tape.constant(Tensor::scalar(0.0)).unwrap();
    let alpha = tape.sigmoid(logit).unwrap();
    assert_eq!(tape.value(alpha).data(), &[0.5]);
    let f = fuse(&mut tape, c, s, alpha).unwrap();
    assert_eq!(tape.value(f).data(), &[2.0, 2.0]);
    let closed = tape.constant(Tensor::scalar(1e-300)).unwrap();
    let f = fuse(&mut tape, c, s, closed).unwrap();
    assert_eq!(tape.value(f).data(), &[1.0, 1.0]);
    let wide = tape.constant(Tensor::from_rows(&[&[1.0, 1.0, 1.0]])).unwrap();
    assert!(fuse(&mut tape, wide, s, alpha).is_err());
}

#[test]
fn initial_state_is_bounded() {
    let model = LeapTs::new(config(8, 4, 2)).unwrap();
    let mut tape = Tape::inference();
    let zero = tape.constant(Tensor::zeros(&[2, 6])).unwrap();
    let h0 = model.init_controller_state(&mut tape, zero).unwrap();
    assert!(tape.value(h0).data().iter().all(|&v| v == 0.0));
    let big = tape.constant(Tensor::full(&[2, 6], 1e3)).unwrap();
    let h = model.init_controller_state(&mut tape, big).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v.abs() <= 1.0));
    assert_eq!(tape.value(h).row_slice(0), tape.value(h).row_slice(1));
}

#[test]
fn fused_output_identity() {
    let model = LeapTs::new(config(16, 8, 2)).unwrap();
    let x = Tensor::new(vec![3, 16, 2], (0..96).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &x, Routing::Eval, &PassControl::default()).unwrap();
    let alpha = tape.value(out.alpha.unwrap()).data()[0];
    assert!(alpha > 0.0 && alpha < 1.0);
    let (f, c, s) = (tape.value(out.fused), tape.value(out.coarse), tape.value(out.sched.unwrap()));
    for i in 0..f.len() {
        assert!((f.data()[i] - c.data()[i] - alpha * s.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn no_sched_variant_is_the_coarse_branch() {
    let full = LeapTs::new(config(16, 8, 2)).unwrap();
    let coarse_only = full.ablate(Ablation::NoSched).unwrap();
    let x = Tensor::new(vec![2, 16, 2], (0..64).map(|i| (i as f64 * 0.21).cos()).collect()).unwrap();
    let mut tape = Tape::inference();
    let out = coarse_only.forward(&mut tape, &x, Routing::Eval, &PassControl::default()).unwrap();
    assert!(out.sched.is_none() && out.traces.is_empty());
    assert_eq!(tape.value(out.fused), tape.value(out.coarse));
    // shared parameters survive the ablation
    let mut t2 = Tape::inference();
    let base = full.forward(&mut t2, &x, Routing::Eval, &PassControl::default()).unwrap();
    assert_eq!(t2.value(base.coarse), tape.value(out.coarse));
}

#[test]
fn no_high_level_variant_uses_one_category() {
    let model = LeapTs::new(config(16, 12, 2)).unwrap().ablate(Ablation::NoHighLevel).unwrap();
    assert_eq!(model.anchors.intervals, vec![(1, 12)]);
    let x = Tensor::new(vec![4, 16, 2], (0..128).map(|i| (i as f64 * 0.13).sin() * 2.0).collect()).unwrap();
    let (_, traces) = model.predict_with(&x, None).unwrap();
    assert!(traces.iter().flat_map(|t| &t.steps).all(|s| s.category == 0));
}

#[test]
fn variant_parameter_counts_are_ordered() {
    let full = LeapTs::new(config(96, 60, 3)).unwrap();
    let no_sched = full.ablate(Ablation::NoSched).unwrap();
    let no_high = full.ablate(Ablation::NoHighLevel).unwrap();
    assert!(no_sched.parameter_count() < no_high.parameter_count());
    assert!(no_high.parameter_count() < full.parameter_count());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { lookback: 0, ..config(8, 4, 1) },
        ModelConfig { clusters: 3, ..config(8, 4, 2) },
        ModelConfig { mask_temperature: 0.0, ..config(8, 4, 1) },
        ModelConfig { gumbel_temperature: -1.0, ..config(8, 4, 1) },
        ModelConfig { tau_min: Some(2.0), ..config(8, 4, 1) },
        ModelConfig { max_steps: Some(0), ..config(8, 4, 1) },
    ];
    for cfg in bad {
        assert!(matches!(LeapTs::new(cfg), Err(Error::Config(_))));
    }
    assert!("sideways".parse::<Ablation>().is_err());
}

#[test]
fn window_norm_inverts_on_the_output() {
    let mut cfg = config(12, 4, 1);
    cfg.window_norm = true;
    let model = LeapTs::new(cfg).unwrap();
    let x = Tensor::new(vec![1, 12, 1], (0..12).map(|i| (i as f64 * 0.5).sin()).collect()).unwrap();
    let shifted = x.map(|v| 3.0 * v + 100.0);
    let (a, b) = (model.predict(&x).unwrap(), model.predict(&shifted).unwrap());
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((3.0 * u + 100.0 - v).abs() < 1e-9);
    }
}

#[test]
fn row_layout_round_trip() {
    let x = Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
    let rows = windows_to_rows(&x, 3, 2).unwrap();
    assert_eq!(rows.row_slice(1), &[1.0, 3.0, 5.0]);
    assert_eq!(rows_to_windows(&rows, 2, 2).unwrap(), x);
}

#[test]
fn checkpoint_round_trip() {
    let mut cfg = config(16, 8, 3);
    cfg.clusters = 2;
    let mut model = LeapTs::new(cfg).unwrap();
    model.set_clusters(vec![1, 0, 1]).unwrap();
    let scaler = Scaler { mean: vec![1.0, 2.0, 3.0], std: vec![0.5, 1.0, 2.0] };
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &model, Some(&scaler)).unwrap();
    assert!(buf.starts_with(b"LEAPTS1\n"));
    let back = read_checkpoint(buf.as_slice()).unwrap();
    assert_eq!(back.model.config, model.config);
    assert_eq!(back.model.clusters, model.clusters);
    assert_eq!(back.scaler, Some(scaler));
    for (name, t) in model.params.iter() {
        assert_eq!(back.model.params.get(name).unwrap(), t);
    }
    let mut corrupt = buf.clone();
    corrupt[0] = b'X';
    assert!(matches!(read_checkpoint(corrupt.as_slice()), Err(Error::Checkpoint(_))));
    assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_outputs_are_finite(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut cfg = config(12, 6, 2);
        cfg.seed = seed;
        let model = LeapTs::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![2, 12, 2], (0..48).map(|_| rng.random_range(-scale..scale)).collect()).unwrap();
        let y = model.predict(&x).unwrap();
        prop_assert!(y.is_finite());
        prop_assert_eq!(y.shape(), &[2, 6, 2]);
    }
}
