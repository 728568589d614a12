use super::config::ModelConfig;
use super::layers::{residual, sinusoid, FeedForward, Fwd, LayerNorm, MultiHeadAttention};
use super::params::{Init, ParamId, Params};
use crate::error::{Error, Result};
use crate::numeric::{Mask, Var};

#[derive(Debug, Clone)]
struct CrossAttention {
    ln: LayerNorm,
    attn: MultiHeadAttention,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<CrossAttention>,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Output of one label-side pass.
pub struct DecoderPass {
    /// Per-layer outputs `[n×d]`, bottom to top (before the final norm).
    pub layers: Vec<Var>,
    /// Normalised top-layer states `s^L`, `[n×d]`.
    pub top: Var,
    /// Cross-attention weight nodes, one per layer (empty for the predictor).
    pub cross_weights: Vec<Var>,
}

/// Label-side Transformer. With cross-attention it is the AED decoder
/// conditioned on encoder frames; without it, the baseline predictor.
#[derive(Debug, Clone)]
pub struct Decoder {
    embed: ParamId,
    layers: Vec<DecoderLayer>,
    ln_out: LayerNorm,
    d_model: usize,
    vocab: usize,
}

/// Name fragment shared by every cross-attention parameter.
pub const CROSS_ATTENTION_TAG: &str = ".cross.";

impl Decoder {
    pub(crate) fn new(params: &mut Params, init: &mut Init, cfg: &ModelConfig, cross: bool) -> Self {
        let d = cfg.d_model;
        let embed = params.add("decoder.embed", init.normal(cfg.vocab_size, d, 1.0));
        let layers = (0..cfg.decoder_layers)
            .map(|i| {
                let name = format!("decoder.layer{i}");
                DecoderLayer {
                    ln_self: LayerNorm::new(params, init, &format!("{name}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(params, init, &format!("{name}.self"), d, cfg.n_heads),
                    cross: cross.then(|| CrossAttention {
                        ln: LayerNorm::new(params, init, &format!("{name}.cross.ln"), d),
                        attn: MultiHeadAttention::new(params, init, &format!("{name}.cross.attn"), d, cfg.n_heads),
                    }),
                    ln_ffn: LayerNorm::new(params, init, &format!("{name}.ln_ffn"), d),
                    ffn: FeedForward::new(params, init, &format!("{name}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(params, init, "decoder.ln_out", d);
        Self {
            embed,
            layers,
            ln_out,
            d_model: d,
            vocab: cfg.vocab_size,
        }
    }

    pub fn has_cross_attention(&self) -> bool {
        self.layers.iter().any(|l| l.cross.is_some())
    }

    /// Runs the decoder over `prefix` (starting with BOS) under a causal mask.
    /// `memory` is the visible encoder prefix `h[0..horizon]`; it is required
    /// with cross-attention and ignored without.
    pub fn forward(&self, f: &mut Fwd, prefix: &[usize], memory: Option<Var>) -> Result<DecoderPass> {
        if prefix.is_empty() {
            return Err(Error::Input("decoder prefix must contain BOS".into()));
        }
        if let Some(&bad) = prefix.iter().find(|&&y| y >= self.vocab) {
            return Err(Error::Input(format!("token {bad} outside the decoder vocabulary")));
        }
        if self.has_cross_attention() && memory.is_none() {
            return Err(Error::Input("decoder needs encoder frames".into()));
        }
        let n = prefix.len();
        let emb = { let table = f.var(self.embed)?; f.g.embedding(table, prefix)? };
        let pos = f.g.input(sinusoid(0..n, self.d_model))?;
        let x = f.g.add(emb, pos)?;
        let mut x = f.drop(x)?;
        let causal = Mask::causal(n);
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut cross_weights = Vec::new();
        for layer in &self.layers {
            let h = layer.ln_self.forward(f, x)?;
            let a = layer.self_attn.forward(f, h, h, Some(&causal))?;
            x = residual(f, x, a)?;
            if let (Some(cross), Some(mem)) = (&layer.cross, memory) {
                let h = cross.ln.forward(f, x)?;
                let (a, w) = cross.attn.forward_with_weights(f, h, mem, None)?;
                cross_weights.push(w);
                x = residual(f, x, a)?;
            }
            let h = layer.ln_ffn.forward(f, x)?;
            let h = layer.ffn.forward(f, h)?;
            x = residual(f, x, h)?;
            layers.push(x);
        }
        let top = self.ln_out.forward(f, x)?;
        Ok(DecoderPass {
            layers,
            top,
            cross_weights,
        })
    }
}
