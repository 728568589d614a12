use super::chunks::{ChunkSchedule, EncoderLayout};
use super::config::ModelConfig;
use super::layers::{residual, sinusoid, FeedForward, Fwd, LayerNorm, Linear, MultiHeadAttention};
use super::params::{Init, Params};
use crate::error::{Error, Result};
use crate::numeric::{Mask, Tensor, Var};

/// Concatenates each group of `factor` consecutive frames; the final group is
/// zero-padded. `[T×F] -> [ceil(T/factor) × factor·F]`.
pub fn stack_frames(x: &Tensor, factor: usize) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::shape("stack_frames", format!("expected [T×F], got {:?}", x.shape())));
    }
    let (t, f) = (x.shape()[0], x.shape()[1]);
    let out_t = t.div_ceil(factor);
    let mut data = vec![0.0; out_t * factor * f];
    data[..t * f].copy_from_slice(x.data());
    Tensor::new(vec![out_t, factor * f], data)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn forward(&self, f: &mut Fwd, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let n = self.ln_attn.forward(f, x)?;
        let a = self.attn.forward(f, n, n, mask)?;
        let x = residual(f, x, a)?;
        let n = self.ln_ffn.forward(f, x)?;
        let h = self.ffn.forward(f, n)?;
        residual(f, x, h)
    }
}

/// Frame-stacking front end followed by chunk-masked Transformer layers.
#[derive(Debug, Clone)]
pub struct Encoder {
    input: Linear,
    layers: Vec<EncoderLayer>,
    ln_out: LayerNorm,
    d_model: usize,
    factor: usize,
}

impl Encoder {
    pub(crate) fn new(params: &mut Params, init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let input = Linear::new(params, init, "encoder.input", cfg.feature_dim * cfg.downsample_factor, d, true);
        let layers = (0..cfg.encoder_layers)
            .map(|i| {
                let name = format!("encoder.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(params, init, &format!("{name}.ln_attn"), d),
                    attn: MultiHeadAttention::new(params, init, &format!("{name}.attn"), d, cfg.n_heads),
                    ln_ffn: LayerNorm::new(params, init, &format!("{name}.ln_ffn"), d),
                    ffn: FeedForward::new(params, init, &format!("{name}.ffn"), d, cfg.ffn_dim),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(params, init, "encoder.ln_out", d);
        Self {
            input,
            layers,
            ln_out,
            d_model: d,
            factor: cfg.downsample_factor,
        }
    }

    /// Encodes raw frames `[T×F]` into `[T'×d]`.
    ///
    /// With `chunk_frames >= T'` every frame sees the whole utterance and no
    /// mask is built. Otherwise lookahead chunks enter as duplicated
    /// right-context rows (see [`EncoderLayout`]).
    pub fn forward(&self, f: &mut Fwd, x: &Tensor, chunk_frames: usize, lookahead: usize) -> Result<Var> {
        if x.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::Input("empty input".into()));
        }
        let stacked = stack_frames(x, self.factor)?;
        let frames = stacked.rows();
        let xs = f.g.input(stacked)?;
        let proj = self.input.forward(f, xs)?;
        if chunk_frames >= frames {
            let pos = f.g.input(sinusoid(0..frames, self.d_model))?;
            let h = f.g.add(proj, pos)?;
            let mut h = f.drop(h)?;
            for layer in &self.layers {
                h = layer.forward(f, h, None)?;
            }
            return self.ln_out.forward(f, h);
        }
        let schedule = ChunkSchedule::new(chunk_frames, frames);
        let layout = EncoderLayout::new(&schedule, lookahead);
        let pos = f.g.input(sinusoid(0..frames, self.d_model))?;
        let h = f.g.add(proj, pos)?;
        let h = f.drop(h)?;
        let mut h = if layout.rows.len() == frames {
            h
        } else {
            f.g.gather_rows(h, &layout.rows)?
        };
        for layer in &self.layers {
            h = layer.forward(f, h, Some(&layout.mask))?;
        }
        let main = if layout.rows.len() == frames {
            h
        } else {
            f.g.slice_rows(h, 0, frames)?
        };
        self.ln_out.forward(f, main)
    }
}
