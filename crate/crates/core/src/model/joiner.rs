use super::config::ModelConfig;
use super::layers::{Fwd, Linear};
use super::params::{Init, Params};
use crate::error::{Error, Result};
use crate::numeric::Var;

/// `z(t,u) = W_out · relu(W_f · tanh(W_h h_t + W_s s_u) + b_f) + b_out`.
#[derive(Debug, Clone)]
pub struct Joiner {
    enc_proj: Linear,
    pred_proj: Linear,
    hidden: Linear,
    out: Linear,
}

impl Joiner {
    pub(crate) fn new(params: &mut Params, init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            enc_proj: Linear::new(params, init, "joiner.enc_proj", d, d, true),
            pred_proj: Linear::new(params, init, "joiner.pred_proj", d, d, false),
            hidden: Linear::new(params, init, "joiner.hidden", d, d, true),
            out: Linear::new(params, init, "joiner.out", d, cfg.classes(), true),
        }
    }

    pub fn project_frames(&self, f: &mut Fwd, h: Var) -> Result<Var> {
        self.enc_proj.forward(f, h)
    }

    pub fn project_states(&self, f: &mut Fwd, s: Var) -> Result<Var> {
        self.pred_proj.forward(f, s)
    }

    /// Logits for every (frame, label) pair of projected inputs:
    /// `[t×d] ⊕ [u×d] -> [(t·u)×classes]`, frame-major.
    pub fn combine(&self, f: &mut Fwd, frames: Var, states: Var) -> Result<Var> {
        let pair = f.g.pairwise_add(frames, states)?;
        self.head(f, pair)
    }

    /// Same as [`Joiner::combine`] over several (frames, states) blocks whose
    /// outputs are concatenated in order.
    pub fn combine_blocks(&self, f: &mut Fwd, blocks: &[(Var, Var)]) -> Result<Var> {
        if blocks.is_empty() {
            return Err(Error::Input("joiner needs at least one block".into()));
        }
        let pairs = blocks
            .iter()
            .map(|&(h, s)| f.g.pairwise_add(h, s))
            .collect::<Result<Vec<_>>>()?;
        let pair = if pairs.len() == 1 { pairs[0] } else { f.g.concat_rows(&pairs)? };
        self.head(f, pair)
    }

    fn head(&self, f: &mut Fwd, pair: Var) -> Result<Var> {
        let a = f.g.tanh(pair)?;
        let z = self.hidden.forward(f, a)?;
        let z = f.g.relu(z)?;
        self.out.forward(f, z)
    }

    /// The output projection applied directly to decoder states.
    pub fn output_projection(&self, f: &mut Fwd, states: Var) -> Result<Var> {
        self.out.forward(f, states)
    }
}
