use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::rng::stream;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, &[]);
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    // scale to norm ~1
    let norm = data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Tensor::new(shape, data.into_iter().map(|x| x / norm * (n as f64).sqrt().min(3.0)).collect())
        .unwrap()
}

/// Builds `loss = Σ f(inputs) ⊙ R` for a fixed random R and compares the
/// tape gradient of every input with central finite differences.
fn grad_check<T: Scalar>(
    inputs: &[Tensor<T>],
    h: f64,
    f: impl Fn(&mut Tape<T>, &[Var]) -> Var,
) -> f64 {
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        randn(tape.value(out).shape(), 99).cast::<T>()
    };
    let eval = |ins: &[Tensor<T>]| -> T {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum(prod);
        tape.value(s).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let mut grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.take(v);
        let numeric = finite_difference(&inputs[i], T::from_f64(h), |probe| {
            let mut ins = inputs.to_vec();
            ins[i] = probe.clone();
            eval(&ins)
        });
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    worst
}

fn check64(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let err = grad_check(inputs, 1e-5, f);
    assert!(err < 1e-6, "64-bit relative error {err:e}");
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
    assert_eq!(tape.value(c).shape(), &[2, 1]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);

    let err = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(err).shape(), &[1, 2]);
    match tape.matmul(b, b) {
        Err(crate::Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 1]);
            assert_eq!(right, vec![2, 1]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_gradient_f32_sum() {
    // d/da sum(a·b) at 32-bit with h = 1e-3
    let a = randn(&[3, 3], 1).cast::<f32>();
    let b = randn(&[3, 3], 2).cast::<f32>();
    let mut tape = Tape::<f32>::new();
    let va = tape.leaf(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c);
    let analytic = tape.backward(s).unwrap().take(va);
    let numeric = finite_difference(&a, 1e-3f32, |probe| {
        let mut t = Tape::<f32>::new();
        let va = t.constant(probe.clone());
        let vb = t.constant(b.clone());
        let c = t.matmul(va, vb).unwrap();
        t.value(c).sum()
    });
    assert!(relative_error(&analytic, &numeric, 1e-6) < 1e-3);
}

#[test]
fn matmul_gradients_f64() {
    let a = randn(&[3, 4], 3);
    let b = randn(&[4, 2], 4);
    check64(&[a.clone(), b], |t, v| t.matmul(v[0], v[1]).unwrap());
    let bt = randn(&[5, 4], 5);
    check64(&[a, bt], |t, v| t.matmul_t(v[0], v[1]).unwrap());
}

#[test]
fn elementwise_gradients_f64() {
    let a = randn(&[3, 4], 6);
    let b = randn(&[3, 4], 7);
    let bias = randn(&[4], 8);
    check64(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap());
    check64(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap());
    check64(&[a.clone(), bias], |t, v| t.add_row(v[0], v[1]).unwrap());
    check64(std::slice::from_ref(&a), |t, v| t.scale(v[0], 2.5));
    check64(std::slice::from_ref(&a), |t, v| t.add_scalar(v[0], 2.5));
    check64(std::slice::from_ref(&a), |t, v| t.transpose(v[0]));
    check64(std::slice::from_ref(&a), |t, v| t.gelu(v[0]));
    check64(std::slice::from_ref(&a), |t, v| t.relu(v[0]));
    check64(std::slice::from_ref(&a), |t, v| t.softmax_rows(v[0]));
    check64(std::slice::from_ref(&a), |t, v| t.l2_normalize_rows(v[0]));
    check64(&[a], |t, v| {
        let s = t.sum(v[0]);
        t.scale(s, 0.5)
    });
}

#[test]
fn square_matrix_reductions_gradients_f64() {
    let s = randn(&[4, 4], 9);
    check64(std::slice::from_ref(&s), |t, v| t.diag_cross_entropy(v[0]).unwrap());
    check64(&[s], |t, v| t.offdiag_mean(v[0]).unwrap());
}

#[test]
fn layer_norm_gradient_and_examples() {
    let x = randn(&[3, 5], 10);
    let g = randn(&[5], 11);
    let b = randn(&[5], 12);
    check64(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());

    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::full(&[3], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let c = tape.constant(Tensor::full(&[1, 3], 4.2));
    let y = tape.layer_norm(c, ones, zeros, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let ones = tape.constant(Tensor::full(&[2], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
    let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
    for (&got, want) in tape.value(y).data().iter().zip([1.0, -1.0]) {
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_gradient_f32() {
    let x = randn(&[2, 6], 13).cast::<f32>();
    let g = randn(&[6], 14).cast::<f32>();
    let b = randn(&[6], 15).cast::<f32>();
    let err = grad_check(&[x, g, b], 1e-3, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
    });
    assert!(err < 1e-3, "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(
        Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1000.0, 0.0]]).unwrap(),
    );
    let y = tape.softmax_rows(x);
    let d = tape.value(y).data();
    assert_eq!(&d[0..2], &[0.5, 0.5]);
    let e2 = 2f64.exp();
    assert!((d[2] - e2 / (e2 + 1.0)).abs() < 1e-12);
    assert!((d[3] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
    assert!((d[2] - 0.8808).abs() < 1e-4 && (d[3] - 0.1192).abs() < 1e-4);
    assert_eq!(&d[4..6], &[1.0, 0.0]);
}

#[test]
fn gather_examples() {
    let mut tape = Tape::<f64>::new();
    let table = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let g = tape.gather(table, &[1, 0]).unwrap();
    assert_eq!(tape.value(g).data(), &[0.0, 1.0, 1.0, 0.0]);

    let rep = tape.gather(table, &[0, 0]).unwrap();
    assert_eq!(tape.value(rep).data(), &[1.0, 0.0, 1.0, 0.0]);
    let s = tape.sum(rep);
    let grad = tape.backward(s).unwrap().take(table);
    assert_eq!(grad.data(), &[2.0, 2.0, 0.0, 0.0]);

    match tape.gather(table, &[2]) {
        Err(crate::Error::Vocab { id: 2, size: 2 }) => {}
        _ => panic!("expected vocabulary error"),
    }
    let table = randn(&[4, 3], 16);
    check64(&[table], |t, v| t.gather(v[0], &[3, 1, 3, 0]).unwrap());
}

#[test]
fn mean_pool_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[vec![2.0, 4.0], vec![0.0, 0.0]]).unwrap());
    let p = tape.mean_pool(x).unwrap();
    assert_eq!(tape.value(p).data(), &[1.0, 2.0]);
    assert_eq!(tape.value(p).shape(), &[2]);
    let one = tape.constant(Tensor::from_rows(&[vec![5.0, -1.0]]).unwrap());
    let p = tape.mean_pool(one).unwrap();
    assert_eq!(tape.value(p).data(), &[5.0, -1.0]);
    let empty = tape.constant(Tensor::zeros(&[0, 2]));
    assert!(matches!(
        tape.mean_pool(empty),
        Err(crate::Error::EmptySequence(_))
    ));

    // gradient of sum(mean_pool(x)) is 1/L everywhere
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(randn(&[4, 3], 17));
    let p = tape.mean_pool(x).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap().take(x);
    assert!(g.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    check64(&[randn(&[4, 3], 18)], |t, v| t.mean_pool(v[0]).unwrap());
}

#[test]
fn segment_pooling_gradients() {
    let segs = [
        Segment { start: 0, len: 2 },
        Segment { start: 2, len: 3 },
    ];
    check64(&[randn(&[5, 3], 19)], |t, v| t.segment_mean(v[0], &segs).unwrap());
    check64(&[randn(&[5, 3], 20)], |t, v| t.segment_last(v[0], &segs).unwrap());
}

#[test]
fn attention_gradients() {
    let segs = [
        Segment { start: 0, len: 3 },
        Segment { start: 3, len: 2 },
    ];
    for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
        let q = randn(&[5, 4], 21);
        let k = randn(&[5, 4], 22);
        let v = randn(&[5, 4], 23);
        check64(&[q, k, v], |t, x| t.attention(x[0], x[1], x[2], &segs, 2, mode).unwrap());
    }
}

#[test]
fn attention_respects_segments_and_causality() {
    let segs = [
        Segment { start: 0, len: 2 },
        Segment { start: 2, len: 2 },
    ];
    let q = randn(&[4, 2], 24);
    let k = randn(&[4, 2], 25);
    let mut v = randn(&[4, 2], 26);
    let run = |v: &Tensor<f64>| {
        let mut t = Tape::new();
        let (a, b, c) = (
            t.constant(q.clone()),
            t.constant(k.clone()),
            t.constant(v.clone()),
        );
        let o = t.attention(a, b, c, &segs, 1, AttentionMode::Causal).unwrap();
        t.value(o).clone()
    };
    let before = run(&v);
    // changing the last row of segment 0 affects only its own last output row
    v.data_mut()[2] += 1.0;
    let after = run(&v);
    assert_eq!(before.row(0), after.row(0));
    assert_ne!(before.row(1), after.row(1));
    assert_eq!(before.row(2), after.row(2));
    assert_eq!(before.row(3), after.row(3));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(randn(&[2, 3], 27));
    let s = tape.sum(w);
    let g = tape.backward(s).unwrap().take(w);
    assert!(g.data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(randn(&[2, 3], 28));
    let unreachable = tape.leaf(randn(&[2], 29));
    let f = tape.gelu(w);
    let z = tape.scale(f, 0.0);
    let s = tape.sum(z);
    let mut grads = tape.backward(s).unwrap();
    assert!(grads.take(w).data().iter().all(|&v| v == 0.0));
    assert!(grads.take(unreachable).data().iter().all(|&v| v == 0.0));

    assert!(matches!(tape.backward(w), Err(crate::Error::Contract(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(randn(&[6, 4], 30).cast());
        let b = tape.leaf(randn(&[4, 4], 31).cast());
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c);
        let s = tape.softmax_rows(d);
        let sq = tape_slice_square(&mut tape, s);
        let l = tape.diag_cross_entropy(sq).unwrap();
        let mut g = tape.backward(l).unwrap();
        (g.take(a), g.take(b))
    };
    assert_eq!(run(), run());
}

fn tape_slice_square(tape: &mut Tape<f32>, x: Var) -> Var {
    // 6×4 → 4×4 via xᵀx
    let t = tape.transpose(x);
    tape.matmul(t, x).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(
        proptest::collection::vec(-50.0f64..50.0, 5), 1..6)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = tape.softmax_rows(x);
        for row in tape.value(y).data().chunks(5) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }
}
