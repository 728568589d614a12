#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taed::numeric::{Graph, Mask, Tensor, Var};
use taed::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Builds a scalar from parameter handles; used for both the analytic and
/// the numeric route.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn eval(build: &Builder, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).item()
}

/// Norm-wise relative error between the analytic gradient and central
/// differences with step `eps`, over every input entry.
pub fn grad_check(build: &Builder, inputs: &[Tensor], eps: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let a = grads.get(vars[i]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            numeric.push((eval(build, &plus) - eval(build, &minus)) / (2.0 * eps));
            analytic.push(a[j]);
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}

/// Weighted sum `Σ w ⊙ x` with fixed random weights, turning any output
/// into a scalar whose gradient exercises every entry.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = g.input(w)?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Transducer negative log-likelihood by explicit enumeration of every
/// monotone lattice path. `lp` is `[T×(U+1)×K]` log-probabilities.
pub fn brute_force_rnnt(lp: &Tensor, targets: &[usize], blank: usize) -> f64 {
    let (t_len, u_len, k) = (lp.shape()[0], lp.shape()[1] - 1, lp.shape()[2]);
    let at = |t: usize, u: usize, c: usize| lp.data()[(t * (u_len + 1) + u) * k + c];
    let mut paths = Vec::new();
    fn walk(t: usize, u: usize, acc: f64, t_len: usize, u_len: usize, f: &dyn Fn(usize, usize) -> (f64, f64), out: &mut Vec<f64>) {
        let (emit, blank) = f(t, u);
        if t == t_len - 1 && u == u_len {
            out.push(acc + blank);
            return;
        }
        if u < u_len {
            walk(t, u + 1, acc + emit, t_len, u_len, f, out);
        }
        if t < t_len - 1 {
            walk(t + 1, u, acc + blank, t_len, u_len, f, out);
        }
    }
    let cell = |t: usize, u: usize| {
        let emit = if u < u_len { at(t, u, targets[u]) } else { f64::NAN };
        (emit, at(t, u, blank))
    };
    walk(0, 0, 0.0, t_len, u_len, &cell, &mut paths);
    -lse(&paths)
}

/// Number of monotone paths through a `T×(U+1)` lattice.
pub fn path_count(t: usize, u: usize) -> usize {
    // C(T-1+U, U)
    let (n, k) = (t - 1 + u, u);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

pub const GRAD_EPS: f64 = 1e-5;

fn check(out: &mut Vec<(&'static str, f64)>, name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    out.push((name, grad_check(&build, &inputs, GRAD_EPS)));
}

/// Central-difference relative error for every differentiable graph op,
/// the transducer loss, and a small composed network.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let a = random_tensor(&mut r, &[4, 5], 1.0);
    let b = random_tensor(&mut r, &[5, 3], 1.0);
    check(&mut out, "matmul", vec![a, b], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 9)
    });
    elementwise_gradients(&mut out);
    structured_gradients(&mut out);
    attention_gradients(&mut out);
    rnnt_gradient(&mut out);
    two_layer_network_chain_rule(&mut out);
    out
}

fn elementwise_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[3, 4], 2.0);
    let y = random_tensor(&mut r, &[3, 4], 2.0);
    let b = random_tensor(&mut r, &[4], 1.0);
    check(out, "add", vec![x.clone(), y.clone()], |g, v| {
        let o = g.add(v[0], v[1])?;
        project(g, o, 10)
    });
    check(out, "mul", vec![x.clone(), y.clone()], |g, v| {
        let o = g.mul(v[0], v[1])?;
        project(g, o, 11)
    });
    check(out, "add_bias", vec![x.clone(), b.clone()], |g, v| {
        let o = g.add_bias(v[0], v[1])?;
        project(g, o, 12)
    });
    check(out, "scale", vec![x.clone()], |g, v| {
        let o = g.scale(v[0], -1.7)?;
        project(g, o, 13)
    });
    check(out, "tanh", vec![x.clone()], |g, v| {
        let o = g.tanh(v[0])?;
        project(g, o, 14)
    });
    check(out, "gelu", vec![x.clone()], |g, v| {
        let o = g.gelu(v[0])?;
        project(g, o, 15)
    });
    // Keep ReLU inputs away from the kink.
    let away = x.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    check(out, "relu", vec![away], |g, v| {
        let o = g.relu(v[0])?;
        project(g, o, 16)
    });
    check(out, "mean", vec![x.clone()], |g, v| {
        let o = g.mul(v[0], v[0])?;
        g.mean(o)
    });
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.25 }).collect();
    check(out, "dropout", vec![x], move |g, v| {
        let o = g.dropout_with_mask(v[0], mask.clone())?;
        project(g, o, 17)
    });
}

fn structured_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(3);
    let x = random_tensor(&mut r, &[3, 6], 1.5);
    let w = random_tensor(&mut r, &[6, 2], 1.0);
    let b = random_tensor(&mut r, &[2], 1.0);
    let gain = random_tensor(&mut r, &[6], 1.0);
    let beta = random_tensor(&mut r, &[6], 1.0);
    check(out, "linear", vec![x.clone(), w, b], |g, v| {
        let o = g.linear(v[0], v[1], v[2])?;
        project(g, o, 20)
    });
    check(out, "layer_norm", vec![x.clone(), gain, beta], |g, v| {
        let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, o, 21)
    });
    check(out, "log_softmax", vec![x.clone()], |g, v| {
        let o = g.log_softmax(v[0])?;
        project(g, o, 22)
    });
    let table = random_tensor(&mut r, &[5, 4], 1.0);
    check(out, "embedding", vec![table], |g, v| {
        let o = g.embedding(v[0], &[4, 0, 4, 2])?;
        project(g, o, 23)
    });
    let y = random_tensor(&mut r, &[2, 6], 1.0);
    check(out, "gather_concat_reshape", vec![x.clone(), y.clone()], |g, v| {
        let a = g.gather_rows(v[0], &[2, 0, 2])?;
        let c = g.concat_rows(&[a, v[1]])?;
        let o = g.reshape(c, &[5, 3, 2])?;
        project(g, o, 24)
    });
    check(out, "pairwise_add", vec![x, y], |g, v| {
        let o = g.pairwise_add(v[0], v[1])?;
        let o = g.tanh(o)?;
        project(g, o, 25)
    });
    let s = random_tensor(&mut r, &[2, 3], 1.0);
    check(out, "pick_logsumexp2", vec![s], |g, v| {
        let a = g.pick(v[0], &[1])?;
        let b = g.pick(v[0], &[4])?;
        let c = g.logsumexp2(a, b)?;
        let d = g.pick(v[0], &[5])?;
        g.logsumexp2(c, d)
    });
}

fn attention_gradients(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(4);
    let q = random_tensor(&mut r, &[3, 4], 1.0);
    let k = random_tensor(&mut r, &[5, 4], 1.0);
    let v = random_tensor(&mut r, &[5, 4], 1.0);
    check(out, "attention", vec![q.clone(), k.clone(), v.clone()], |g, x| {
        let o = g.attention(x[0], x[1], x[2], 2, None)?;
        project(g, o, 30)
    });
    let mask = Mask::from_fn(3, 5, |i, j| j <= i + 1);
    check(out, "masked_attention", vec![q, k, v], move |g, x| {
        let o = g.attention(x[0], x[1], x[2], 2, Some(&mask))?;
        project(g, o, 31)
    });
}

fn rnnt_gradient(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(5);
    let logits = random_tensor(&mut r, &[3, 3, 4], 2.0);
    check(out, "rnnt", vec![logits], |g, v| {
        let lp = g.log_softmax(v[0])?;
        g.rnnt(lp, &[1, 2], 3)
    });
}

fn two_layer_network_chain_rule(out: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(6);
    let x = random_tensor(&mut r, &[4, 3], 1.0);
    let w1 = random_tensor(&mut r, &[3, 5], 1.0);
    let b1 = random_tensor(&mut r, &[5], 0.5);
    let w2 = random_tensor(&mut r, &[5, 2], 1.0);
    let b2 = random_tensor(&mut r, &[2], 0.5);
    check(out, "mlp", vec![x, w1, b1, w2, b2], |g, v| {
        let h = g.linear(v[0], v[1], v[2])?;
        let h = g.tanh(h)?;
        let o = g.linear(h, v[3], v[4])?;
        let o = g.log_softmax(o)?;
        project(g, o, 40)
    });
}
