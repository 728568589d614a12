use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chunk size large enough to cover any utterance: full-context encoding.
pub const OFFLINE_CHUNK: usize = 1 << 30;

/// Which network sits on the label side of the joiner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Decoder with cross-attention over the shared encoder (hybrid model).
    Taed,
    /// Token-only self-attention predictor (baseline transducer).
    Transducer,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Taed => "taed",
            ModelKind::Transducer => "transducer",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taed" => Ok(ModelKind::Taed),
            "transducer" | "baseline" => Ok(ModelKind::Transducer),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    /// Output vocabulary size excluding blank; index 0 is reserved for BOS.
    pub vocab_size: usize,
    pub downsample_factor: usize,
    /// Encoder-output frames per chunk; [`OFFLINE_CHUNK`] disables chunking.
    pub chunk_frames: usize,
    pub lookahead_chunks: usize,
    /// Milliseconds of source per raw input frame.
    pub raw_frame_ms: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Taed,
            feature_dim: 16,
            d_model: 64,
            n_heads: 4,
            encoder_layers: 4,
            decoder_layers: 2,
            ffn_dim: 128,
            vocab_size: 32,
            downsample_factor: 4,
            chunk_frames: OFFLINE_CHUNK,
            lookahead_chunks: 1,
            raw_frame_ms: 10.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.chunk_frames == 0 {
            return fail("chunk_frames must be at least 1".into());
        }
        if self.downsample_factor == 0 {
            return fail("downsample_factor must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must leave room for BOS and one symbol".into());
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 {
            return fail("feature_dim and ffn_dim must be positive".into());
        }
        if self.raw_frame_ms <= 0.0 {
            return fail("raw_frame_ms must be positive".into());
        }
        Ok(())
    }

    /// Blank is the last logit.
    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Token fed to the decoder before any output.
    pub fn bos(&self) -> usize {
        0
    }

    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Source milliseconds represented by one encoder frame.
    pub fn frame_ms(&self) -> f64 {
        self.raw_frame_ms * self.downsample_factor as f64
    }

    /// Encoder frames for `raw` input frames.
    pub fn encoder_frames(&self, raw: usize) -> usize {
        raw.div_ceil(self.downsample_factor)
    }

    pub fn is_offline(&self, frames: usize) -> bool {
        self.chunk_frames >= frames
    }

    pub fn with_chunk(&self, chunk_frames: usize) -> Self {
        Self {
            chunk_frames,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.blank(), 32);
        assert_eq!(c.classes(), 33);
        assert_eq!(c.frame_ms(), 40.0);
    }

    #[test]
    fn ceil_downsampling() {
        let c = ModelConfig::default();
        assert_eq!(c.encoder_frames(9), 3);
        assert_eq!(c.encoder_frames(8), 2);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            chunk_frames: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
