use super::*;
use crate::error::Error;

/// Central-difference gradient of `f` with respect to every entry of every
/// parameter in `store`.
fn numeric_grads(store: &ParamStore, f: &dyn Fn(&ParamStore) -> f64, h: f64) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let n = store.get(&name).unwrap().len();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= h;
            *gi = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out.push((name, g));
    }
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn check_graph(store: &ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> Var) {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let analytic = tape.backward(loss).unwrap();
    let f = |s: &ParamStore| {
        let mut t = Tape::inference();
        let l = build(&mut t, s);
        t.value(l).data()[0]
    };
    for (name, numeric) in numeric_grads(store, &f, 1e-5) {
        let a = analytic.get(&name).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; numeric.len()]);
        for (i, (x, y)) in a.iter().zip(&numeric).enumerate() {
            assert!(rel_err(*x, *y) < 1e-4, "{name}[{i}]: analytic {x} vs numeric {y}");
        }
    }
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone());
    }
    s
}

fn m(rows: usize, cols: usize, seed: u64) -> Tensor {
    // cheap deterministic fill
    let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..rows * cols)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

#[test]
fn tanh_and_sigmoid_at_zero() {
    let s = store(&[("x", Tensor::scalar(0.0))]);
    let mut tape = Tape::new();
    let x = s.load(&mut tape, "x").unwrap();
    let y = tape.tanh(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.0);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get("x").unwrap().data()[0], 1.0);

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0)).unwrap();
    let y = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.5);
}

#[test]
fn matmul_by_hand() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
    let b = tape.constant(Tensor::from_rows(&[&[1.0], &[1.0]])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_op_and_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn linear_map_gradient() {
    let s = store(&[("w", Tensor::from_rows(&[&[0.3, -0.7]]))]);
    let mut tape = Tape::new();
    let w = s.load(&mut tape, "w").unwrap();
    let x = tape.constant(Tensor::column(vec![1.0, 1.0])).unwrap();
    let y = tape.matmul(w, x).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get("w").unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn detached_branch_contributes_nothing() {
    let s = store(&[("x", Tensor::scalar(2.0))]);
    let mut tape = Tape::new();
    let x = s.load(&mut tape, "x").unwrap();
    let d = tape.detach(x).unwrap();
    let y = tape.mul(x, d).unwrap();
    let g = tape.backward(y).unwrap();
    // d(x * stop(x))/dx = stop(x)
    assert_eq!(g.get("x").unwrap().data()[0], 2.0);

    let mut tape = Tape::new();
    let x = s.load(&mut tape, "x").unwrap();
    let d = tape.detach(x).unwrap();
    let y = tape.tanh(d).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get("x").is_none());
}

#[test]
fn backward_twice_is_rejected() {
    let s = store(&[("x", Tensor::scalar(1.0))]);
    let mut tape = Tape::new();
    let x = s.load(&mut tape, "x").unwrap();
    let y = tape.tanh(x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
}

#[test]
fn backward_errors() {
    let mut empty = Tape::new();
    let mut other = Tape::new();
    let v = other.constant(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(empty.backward(v), Err(Error::Tape(_))));

    let mut tape = Tape::new();
    let x = tape.param("x", Tensor::row(vec![1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    // loss from a different tape
    let mut tape = Tape::new();
    tape.constant(Tensor::scalar(0.0)).unwrap();
    assert!(matches!(tape.backward(v), Err(Error::Tape(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(1e308)).unwrap();
    assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite { op: "scale" })));
}

#[test]
fn huber_values() {
    let p = Tensor::scalar(2.0);
    let z = Tensor::scalar(0.0);
    assert_eq!(huber_loss(&p, &p, 1.0).unwrap(), 0.0);
    assert_eq!(huber_loss(&p, &z, 1.0).unwrap(), 1.5);
    assert_eq!(huber_loss(&Tensor::scalar(0.5), &z, 1.0).unwrap(), 0.125);
    assert!(huber_loss(&Tensor::row(vec![1.0, 2.0]), &z, 1.0).is_err());
}

#[test]
fn elementwise_and_reduction_gradients() {
    let s = store(&[("a", m(3, 4, 1)), ("b", m(3, 4, 2)), ("r", m(1, 4, 3)), ("c", m(3, 1, 4)), ("k", m(1, 1, 5))]);
    check_graph(&s, |t, s| {
        let a = s.load(t, "a").unwrap();
        let b = s.load(t, "b").unwrap();
        let r = s.load(t, "r").unwrap();
        let c = s.load(t, "c").unwrap();
        let k = s.load(t, "k").unwrap();
        let x = t.mul(a, b).unwrap();
        let x = t.add_row(x, r).unwrap();
        let x = t.mul_col(x, c).unwrap();
        let x = t.mul_row(x, r).unwrap();
        let x = t.mul_scalar(x, k).unwrap();
        let y = t.sub(x, a).unwrap();
        let y = t.abs(y).unwrap();
        let y = t.sigmoid(y).unwrap();
        let y = t.scale(y, 1.7).unwrap();
        let rows = t.sum_cols(y).unwrap();
        let z = t.tanh(rows).unwrap();
        let m1 = t.mean(z).unwrap();
        let s2 = t.sum(b).unwrap();
        let tot = t.add(m1, s2).unwrap();
        let tot2 = t.mul(tot, tot).unwrap();
        t.add(tot2, m1).unwrap()
    });
}

#[test]
fn matmul_softmax_concat_slice_gradients() {
    let s = store(&[("x", m(4, 3, 11)), ("w", m(3, 5, 12)), ("v", m(4, 2, 13))]);
    check_graph(&s, |t, s| {
        let x = s.load(t, "x").unwrap();
        let w = s.load(t, "w").unwrap();
        let v = s.load(t, "v").unwrap();
        let h = t.matmul(x, w).unwrap();
        let p = t.softmax(h).unwrap();
        let c = t.concat(&[p, v, x]).unwrap();
        let sl = t.slice(c, 2, 8).unwrap();
        let sq = t.mul(sl, sl).unwrap();
        let q = t.clip(sq, 0.0, 0.5).unwrap();
        let e = t.tanh(q).unwrap();
        t.sum(e).unwrap()
    });
}

#[test]
fn row_ops_and_mask_gradients() {
    let s = store(&[
        ("mat", m(4, 6, 21)),
        ("vec", m(4, 2, 22)),
        ("len", Tensor::column(vec![1.3, 2.7, 0.4, 3.1])),
        ("y", m(4, 5, 23)),
    ]);
    check_graph(&s, |t, s| {
        let mat = s.load(t, "mat").unwrap();
        let vec = s.load(t, "vec").unwrap();
        let len = s.load(t, "len").unwrap();
        let y = s.load(t, "y").unwrap();
        let mv = t.row_matvec(mat, vec).unwrap(); // [4 x 3]
        let g = t.gather_rows(mv, &[2, 0, 2]).unwrap();
        let rest = t.gather_rows(mv, &[1, 3]).unwrap();
        let back = t.scatter_rows(&[(g, vec![0, 1, 3]), (rest, vec![2, 4])], 5).unwrap();
        let l1 = t.mul(back, back).unwrap();
        let s1 = t.sum(l1).unwrap();
        let mask = t.soft_mask(len, &[1, 2, 1, 3], 5, 0.4).unwrap();
        let w = t.mul(mask, y).unwrap();
        let s2 = t.sum(w).unwrap();
        let target = t.constant(Tensor::full(&[4, 5], 0.2)).unwrap();
        let h = t.huber(w, target, 0.1).unwrap();
        let a = t.add(s1, s2).unwrap();
        t.add(a, h).unwrap()
    });
}

#[test]
fn straight_through_routes_gradient_to_soft() {
    let s = store(&[("logits", Tensor::row(vec![0.2, -0.1, 0.5]))]);
    let mut tape = Tape::new();
    let lg = s.load(&mut tape, "logits").unwrap();
    let soft = tape.softmax(lg).unwrap();
    let hard = Tensor::row(vec![0.0, 0.0, 1.0]);
    let st = tape.straight_through(hard.clone(), soft).unwrap();
    assert_eq!(tape.value(st), &hard);
    let w = tape.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let y = tape.mul(st, w).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();

    // same gradient as differentiating sum(softmax(logits) * w)
    let mut t2 = Tape::new();
    let lg = s.load(&mut t2, "logits").unwrap();
    let soft = t2.softmax(lg).unwrap();
    let w = t2.constant(Tensor::row(vec![1.0, 2.0, 3.0])).unwrap();
    let y = t2.mul(soft, w).unwrap();
    let l = t2.sum(y).unwrap();
    let g2 = t2.backward(l).unwrap();
    assert_eq!(g.get("logits"), g2.get("logits"));
}

#[test]
fn repeated_loads_accumulate() {
    let s = store(&[("x", Tensor::scalar(3.0))]);
    let mut tape = Tape::new();
    let a = s.load(&mut tape, "x").unwrap();
    let b = s.load(&mut tape, "x").unwrap();
    let y = tape.mul(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get("x").unwrap().data()[0], 6.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn forward_and_backward_are_deterministic(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let s = store(&[("x", Tensor::matrix(2, 3, vals))]);
            let run = || {
                let mut t = Tape::new();
                let x = s.load(&mut t, "x").unwrap();
                let y = t.softmax(x).unwrap();
                let z = t.tanh(y).unwrap();
                let l = t.sum(z).unwrap();
                let v = t.value(l).data()[0];
                (v, t.backward(l).unwrap().get("x").unwrap().clone())
            };
            let (a, ga) = run();
            let (b, gb) = run();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert_eq!(ga, gb);
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let mut t = Tape::inference();
            let x = t.constant(Tensor::matrix(4, 3, vals)).unwrap();
            let y = t.softmax(x).unwrap();
            for r in 0..4 {
                let s: f64 = t.value(y).row_slice(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
