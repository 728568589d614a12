mod common;

use common::{grad_check, project, random_tensor, rng};
use proptest::prelude::*;
use taed::numeric::{log_softmax, logsumexp2, Graph, Mask, Tensor, Var};
use taed::Error;

const EPS: f64 = common::GRAD_EPS;
const TOL: f64 = 1e-5;

#[test]
fn matmul_gradient_is_tight() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[4, 5], 1.0);
    let b = random_tensor(&mut r, &[5, 3], 1.0);
    let build = |g: &mut Graph, v: &[Var]| {
        let y = g.matmul(v[0], v[1])?;
        g.sum(y)
    };
    let err = grad_check(&build, &[a, b], EPS);
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.input(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).unwrap();
    let b = g.input(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap()).unwrap();
    let y = g.matmul(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[11.0]);
    let c = g.input(Tensor::zeros(&[3, 3])).unwrap();
    assert!(matches!(g.matmul(a, c), Err(Error::Shape { .. })));
}

#[test]
fn every_op_passes_finite_differences() {
    for (name, err) in common::gradient_suite() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn log_softmax_examples() {
    let out = log_softmax(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    assert!((out.data()[0] + 2f64.ln()).abs() < 1e-15);
    let out = log_softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    assert!(out.data()[0].abs() < 1e-12 && (out.data()[1] + 1000.0).abs() < 1e-9);
}

#[test]
fn logsumexp2_examples() {
    assert_eq!(logsumexp2(f64::NEG_INFINITY, 3.5), 3.5);
    assert_eq!(logsumexp2(3.5, f64::NEG_INFINITY), 3.5);
    assert!((logsumexp2(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
    // Reference: -1000 + ln 2 evaluated exactly.
    assert_eq!(logsumexp2(-1000.0, -1000.0), -1000.0 + std::f64::consts::LN_2);
}

#[test]
fn attention_examples() {
    let mut r = rng(7);
    let mut g = Graph::new();
    let q = g.input(random_tensor(&mut r, &[3, 4], 1.0)).unwrap();
    let k = g.input(random_tensor(&mut r, &[1, 4], 1.0)).unwrap();
    let v = g.input(random_tensor(&mut r, &[1, 4], 1.0)).unwrap();
    let o = g.attention(q, k, v, 2, None).unwrap();
    for i in 0..3 {
        for (a, b) in g.value(o).row(i).iter().zip(g.value(v).row(0)) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let none = Mask::from_fn(3, 1, |_, _| false);
    assert!(matches!(g.attention(q, k, v, 1, Some(&none)), Err(Error::FullyMasked { row: 0 })));
}

#[test]
fn masked_attention_ignores_hidden_keys() {
    let mut r = rng(8);
    let q = random_tensor(&mut r, &[4, 4], 1.0);
    let k = random_tensor(&mut r, &[4, 4], 1.0);
    let v = random_tensor(&mut r, &[4, 4], 1.0);
    let mask = Mask::causal(4);
    let run = |k: &Tensor, v: &Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()).unwrap(), g.input(k.clone()).unwrap(), g.input(v.clone()).unwrap());
        let o = g.attention(qv, kv, vv, 2, Some(&mask)).unwrap();
        g.value(o).clone()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for j in 0..4 {
        k2.data_mut()[3 * 4 + j] += 5.0;
        v2.data_mut()[3 * 4 + j] -= 5.0;
    }
    let pert = run(&k2, &v2);
    assert_eq!(&base.data()[..12], &pert.data()[..12]);
    assert_ne!(&base.data()[12..], &pert.data()[12..]);
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut r = rng(9);
        let mut g = Graph::new();
        let x = g.input(random_tensor(&mut r, &[3, 4], 1.0)).unwrap();
        let y = g.dropout(x, 0.5, &mut r).unwrap();
        let z = g.gelu(y).unwrap();
        g.value(z).clone()
    };
    assert_eq!(build(), build());
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(vec![1], vec![1e300]).unwrap()).unwrap();
    assert!(matches!(g.mul(x, x), Err(Error::NonFinite(_))));
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn log_softmax_normalises(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = v.len();
        let out = log_softmax(&Tensor::new(vec![n], v).unwrap());
        let s: f64 = out.data().iter().map(|x| x.exp()).sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logsumexp2_commutes(a in -800.0f64..800.0, b in -800.0f64..800.0) {
        prop_assert_eq!(logsumexp2(a, b), logsumexp2(b, a));
        prop_assert!(logsumexp2(a, b) >= a.max(b));
    }

    #[test]
    fn elementwise_ops_have_fd_gradients(seed in 0u64..1000, rows in 1usize..4, cols in 1usize..5) {
        let x = random_tensor(&mut rng(seed), &[rows, cols], 1.0);
        let build = |g: &mut Graph, v: &[Var]| {
            let a = g.tanh(v[0])?;
            let b = g.gelu(v[0])?;
            let c = g.mul(a, b)?;
            let d = g.log_softmax(c)?;
            project(g, d, seed)
        };
        prop_assert!(grad_check(&build, &[x], EPS) < TOL);
    }
}
