use rand_chacha::ChaCha8Rng;

use super::params::{Init, ParamId, Params};
use crate::error::Result;
use crate::numeric::{Graph, Mask, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Forward-pass context: graph, parameter source and the dropout source.
///
/// Parameters are copied into the graph on first use. `rng == None` is
/// evaluation mode.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    params: &'a Params,
    bound: Vec<Option<Var>>,
    trainable: bool,
    pub dropout: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, params: &'a Params, trainable: bool) -> Self {
        Self {
            g,
            params,
            bound: vec![None; params.len()],
            trainable,
            dropout: 0.0,
            rng: None,
        }
    }

    /// Constant parameters, no dropout.
    pub fn eval(g: &'a mut Graph, params: &'a Params) -> Self {
        Self::new(g, params, false)
    }

    /// Trainable parameters with dropout drawn from `rng`.
    pub fn train(g: &'a mut Graph, params: &'a Params, dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            ..Self::new(g, params, true)
        }
    }

    pub fn var(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.index()] {
            return Ok(v);
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable { self.g.param(t)? } else { self.g.input(t)? };
        self.bound[id.index()] = Some(v);
        Ok(v)
    }

    /// Parameters used so far, with their graph handles.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    pub fn drop(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => self.g.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub(crate) fn new(params: &mut Params, init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = params.add(format!("{name}.weight"), init.matrix(fan_in, fan_out));
        let b = bias.then(|| params.add(format!("{name}.bias"), init.constant(fan_out, 0.0)));
        Self { w, b }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let w = f.var(self.w)?;
        let y = f.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.var(b)?;
                f.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(params: &mut Params, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), init.constant(dim, 1.0)),
            bias: params.add(format!("{name}.bias"), init.constant(dim, 0.0)),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let gain = f.var(self.gain)?;
        let bias = f.var(self.bias)?;
        f.g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new(params: &mut Params, init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(params, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(params, init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(params, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(params, init, &format!("{name}.out"), dim, dim, true),
            heads,
        }
    }

    pub fn forward(&self, f: &mut Fwd, query: Var, memory: Var, mask: Option<&Mask>) -> Result<Var> {
        Ok(self.forward_with_weights(f, query, memory, mask)?.0)
    }

    /// Also returns the attention node, whose weights can be inspected.
    pub fn forward_with_weights(&self, f: &mut Fwd, query: Var, memory: Var, mask: Option<&Mask>) -> Result<(Var, Var)> {
        let q = self.q.forward(f, query)?;
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let att = f.g.attention(q, k, v, self.heads, mask)?;
        Ok((self.out.forward(f, att)?, att))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub(crate) fn new(params: &mut Params, init: &mut Init, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(params, init, &format!("{name}.up"), dim, hidden, true),
            down: Linear::new(params, init, &format!("{name}.down"), hidden, dim, true),
        }
    }

    pub fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.g.gelu(h)?;
        let h = f.drop(h)?;
        self.down.forward(f, h)
    }
}

/// `x + dropout(y)`.
pub fn residual(f: &mut Fwd, x: Var, y: Var) -> Result<Var> {
    let y = f.drop(y)?;
    f.g.add(x, y)
}

/// Fixed sinusoidal encodings for positions `0..n` (or the given positions).
pub fn sinusoid(positions: impl Iterator<Item = usize>, dim: usize) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for pos in positions {
        rows += 1;
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![rows, dim], data).expect("at least one position")
}
