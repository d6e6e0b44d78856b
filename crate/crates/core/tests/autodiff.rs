mod common;

use std::sync::Arc;

use common::{grad_check, random_tensor, weighted_sum};
use crossmae::tensor::{Tape, Tensor, TensorError};
use proptest::prelude::*;

const PER_OP_TOL: f64 = 1e-4;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_values() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let n = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let y = tape.matmul(m, n).unwrap();
    assert_eq!(tape.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_rejects_mismatch_with_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_sum_gradient_3x3() {
    let inputs = [random_tensor(&[3, 3], 1), random_tensor(&[3, 3], 2)];
    let err = grad_check(&inputs, &|tape, v| {
        let y = tape.matmul(v[0], v[1]).unwrap();
        tape.sum(y)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn batched_and_broadcast_matmul_gradients() {
    let inputs = [random_tensor(&[2, 3, 4], 3), random_tensor(&[4, 5], 4)];
    let err = grad_check(&inputs, &|tape, v| {
        let y = tape.matmul(v[0], v[1]).unwrap();
        weighted_sum(tape, y, 9)
    });
    assert!(err < PER_OP_TOL, "{err}");
    let inputs = [random_tensor(&[1, 3, 4], 5), random_tensor(&[2, 4, 2], 6)];
    let err = grad_check(&inputs, &|tape, v| {
        let y = tape.matmul(v[0], v[1]).unwrap();
        weighted_sum(tape, y, 10)
    });
    assert!(err < PER_OP_TOL, "{err}");
}

#[test]
fn softmax_values_and_stability() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    let d = tape.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
}

#[test]
fn softmax_jacobian_length5() {
    let inputs = [random_tensor(&[5], 11)];
    let err = grad_check(&inputs, &|tape, v| {
        let y = tape.softmax(v[0]).unwrap();
        weighted_sum(tape, y, 12)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_values() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::full(&[4], 3.5));
    let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);
}

#[test]
fn layer_norm_gradients() {
    let inputs = [random_tensor(&[3, 6], 21), random_tensor(&[6], 22), random_tensor(&[6], 23)];
    let err = grad_check(&inputs, &|tape, v| {
        let y = tape.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
        weighted_sum(tape, y, 24)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gelu_values_and_slope() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, 12.0, -12.0]));
    let y = tape.gelu(x);
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 12.0).abs() < 1e-12);
    assert!(d[2].abs() < 1e-12);
    let err = grad_check(&[t(&[1], &[0.5])], &|tape, v| {
        let y = tape.gelu(v[0]);
        tape.sum(y)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_basics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    // repeated calls accumulate until reset
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn elementwise_and_broadcast_gradients() {
    let inputs = [random_tensor(&[2, 3, 4], 31), random_tensor(&[4], 32), random_tensor(&[3, 4], 33)];
    let err = grad_check(&inputs, &|tape, v| {
        let a = tape.add(v[0], v[1]).unwrap();
        let m = tape.mul(a, v[2]).unwrap();
        let s = tape.sub(m, v[1]).unwrap();
        let s = tape.scale(s, -0.7);
        let b = tape.broadcast_to(v[2], &[2, 3, 4]).unwrap();
        let y = tape.add(s, b).unwrap();
        weighted_sum(tape, y, 34)
    });
    assert!(err < PER_OP_TOL, "{err}");
}

#[test]
fn shape_op_gradients() {
    let inputs = [random_tensor(&[2, 3, 4], 41), random_tensor(&[2, 1, 4], 42)];
    let err = grad_check(&inputs, &|tape, v| {
        let c = tape.concat(&[v[1], v[0]], 1).unwrap();
        let p = tape.permute(c, &[2, 0, 1]).unwrap();
        let r = tape.reshape(p, &[8, 4]).unwrap();
        let tr = tape.transpose(r).unwrap();
        let st = tape.stack(&[v[0], v[0]]).unwrap();
        let sel = tape.select(st, 1).unwrap();
        let a = weighted_sum(tape, tr, 43);
        let b = weighted_sum(tape, sel, 44);
        let both = tape.stack(&[a, b]).unwrap();
        tape.sum(both)
    });
    assert!(err < PER_OP_TOL, "{err}");
}

#[test]
fn gather_and_embedding_gradients() {
    let idx = Arc::new(vec![vec![2, 0, 2], vec![1, 3, 0]]);
    let inputs = [random_tensor(&[2, 4, 3], 51), random_tensor(&[5, 3], 52)];
    let err = grad_check(&inputs, &|tape, v| {
        let g = tape.gather(v[0], idx.clone()).unwrap();
        let e = tape.embedding(v[1], idx.clone()).unwrap();
        let y = tape.mul(g, e).unwrap();
        weighted_sum(tape, y, 53)
    });
    assert!(err < PER_OP_TOL, "{err}");
}

#[test]
fn gather_rejects_out_of_range() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 2]));
    assert!(tape.gather(x, Arc::new(vec![vec![3]])).is_err());
}

#[test]
fn reduction_gradients() {
    let inputs = [random_tensor(&[3, 4, 2], 61)];
    let err = grad_check(&inputs, &|tape, v| {
        let m = tape.mean_axis(v[0], 1).unwrap();
        let s = tape.var_axis(v[0], 2).unwrap();
        let a = weighted_sum(tape, m, 62);
        let b = weighted_sum(tape, s, 63);
        let mm = tape.mean(v[0]);
        let all = tape.stack(&[a, b, mm]).unwrap();
        tape.sum(all)
    });
    assert!(err < PER_OP_TOL, "{err}");
}

#[test]
fn attention_kernels_match_composed_ops_and_fd() {
    let (b, lq, lk, d, heads) = (2, 3, 4, 6, 2);
    let inputs = [random_tensor(&[b, lq, d], 71), random_tensor(&[b, lk, d], 72), random_tensor(&[b, lk, d], 73)];
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let fused = move |tape: &mut Tape<f64>, v: &[crossmae::tensor::Var]| {
        let p = tape.attention_probs(v[0], v[1], heads, scale).unwrap();
        let o = tape.attention_apply(p, v[2]).unwrap();
        weighted_sum(tape, o, 74)
    };
    let composed = move |tape: &mut Tape<f64>, v: &[crossmae::tensor::Var]| {
        let split = |tape: &mut Tape<f64>, x, l| {
            let r = tape.reshape(x, &[b, l, heads, d / heads]).unwrap();
            tape.permute(r, &[0, 2, 1, 3]).unwrap()
        };
        let q = split(tape, v[0], lq);
        let k = split(tape, v[1], lk);
        let val = split(tape, v[2], lk);
        let kt = tape.transpose(k).unwrap();
        let s = tape.matmul(q, kt).unwrap();
        let s = tape.scale(s, scale);
        let p = tape.softmax(s).unwrap();
        let o = tape.matmul(p, val).unwrap();
        let o = tape.permute(o, &[0, 2, 1, 3]).unwrap();
        let o = tape.reshape(o, &[b, lq, d]).unwrap();
        weighted_sum(tape, o, 74)
    };
    let x = common::eval(&inputs, &fused);
    let y = common::eval(&inputs, &composed);
    assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    assert!(grad_check(&inputs, &fused) < PER_OP_TOL);
}

#[test]
fn cross_entropy_gradient() {
    let labels = Arc::new(vec![2, 0, 1]);
    let err = grad_check(&[random_tensor(&[3, 4], 81)], &|tape, v| tape.cross_entropy(v[0], labels.clone()).unwrap());
    assert!(err < PER_OP_TOL, "{err}");
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 4]));
    let l = tape.cross_entropy(x, Arc::new(vec![3])).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let inputs = [random_tensor(&[4, 5, 8], 91), random_tensor(&[8, 8], 92)];
        common::analytic_grads(&inputs, &|tape, v| {
            let h = tape.matmul(v[0], v[1]).unwrap();
            let g = tape.gelu(h);
            let p = tape.attention_probs(g, g, 2, 0.5).unwrap();
            let o = tape.attention_apply(p, h).unwrap();
            weighted_sum(tape, o, 93)
        })
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut tape = Tape::<f64>::new();
        let n = values.len();
        let x = tape.constant(Tensor::from_f64(&[n], &values).unwrap());
        let y = tape.softmax(x).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rows_are_standardized(values in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let mut tape = Tape::<f64>::new();
        let n = values.len();
        let eps = 1e-6;
        let g = tape.constant(Tensor::ones(&[n]));
        let b = tape.constant(Tensor::zeros(&[n]));
        let x = tape.constant(Tensor::from_f64(&[n], &values).unwrap());
        let y = tape.layer_norm(x, g, b, eps).unwrap();
        let d = tape.value(y).data();
        let mu = d.iter().sum::<f64>() / n as f64;
        let var = d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
        let raw_mu = values.iter().sum::<f64>() / n as f64;
        let raw_var = values.iter().map(|v| (v - raw_mu).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mu.abs() < 1e-5);
        prop_assert!(var <= 1.0 + 1e-9);
        prop_assert!((var - raw_var / (raw_var + eps)).abs() < 1e-9);
    }

    #[test]
    fn composite_gradients_match_finite_differences(seed in 0u64..1000, rows in 1usize..4, width in 2usize..5) {
        let inputs = [random_tensor(&[rows, width], seed), random_tensor(&[width, width], seed + 1), random_tensor(&[width], seed + 2)];
        let err = grad_check(&inputs, &|tape, v| {
            let h = tape.matmul(v[0], v[1]).unwrap();
            let h = tape.gelu(h);
            let h = tape.layer_norm(h, v[2], v[2], 1e-6).unwrap();
            let s = tape.softmax(h).unwrap();
            weighted_sum(tape, s, seed + 3)
        });
        prop_assert!(err < PER_OP_TOL, "rel err {}", err);
    }
}
