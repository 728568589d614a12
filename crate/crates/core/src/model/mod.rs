//! The hybrid transducer network: a chunked speech encoder shared by the
//! joiner and an attention decoder that doubles as the transducer predictor,
//! plus a baseline transducer whose predictor sees tokens only.

pub mod checkpoint;
pub mod chunks;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod joiner;
pub mod layers;
pub mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::Checkpoint;
pub use chunks::{ChunkSchedule, EncoderLayout};
pub use config::{ModelConfig, ModelKind, OFFLINE_CHUNK};
pub use decoder::CROSS_ATTENTION_TAG;
pub use layers::Fwd;
pub use params::{ParamId, Params};

use crate::error::{Error, Result};
use crate::losses::{self, FastAlignment, HorizonLogits};
use crate::numeric::{Graph, Tensor, Var};
use decoder::Decoder;
use encoder::Encoder;
use joiner::Joiner;
use params::Init;

/// Encoder output for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[T'×d_model]`.
    pub h: Tensor,
    /// Source milliseconds per encoder frame.
    pub frame_ms: f64,
}

impl EncoderOutput {
    pub fn frames(&self) -> usize {
        self.h.rows()
    }

    /// Rows `0..horizon` as a new tensor.
    pub fn prefix(&self, horizon: usize) -> Result<Tensor> {
        prefix_rows(&self.h, horizon)
    }
}

fn prefix_rows(t: &Tensor, horizon: usize) -> Result<Tensor> {
    if horizon == 0 || horizon > t.rows() {
        return Err(Error::Input(format!("horizon {horizon} outside 1..={}", t.rows())));
    }
    Tensor::new(vec![horizon, t.cols()], t.data()[..horizon * t.cols()].to_vec())
}

/// Label-side states for a token prefix, all computed against one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStates {
    /// Per-layer outputs `[n×d]`, bottom to top.
    pub layers: Vec<Tensor>,
    /// Normalised top-layer states `[n×d]`; row `u` follows `BOS, y_1..y_u`.
    pub top: Tensor,
    /// Encoder frames visible to these states; `None` for the token-only
    /// predictor.
    pub horizon: Option<usize>,
}

/// Decoder pass for one chunk in the training-side forward.
pub struct ChunkPass {
    pub horizon: usize,
    pub top: Var,
    pub cross_weights: Vec<Var>,
}

/// Training-side forward up to the joiner logits.
pub struct LatticeForward {
    pub h: Var,
    pub schedule: ChunkSchedule,
    pub passes: Vec<ChunkPass>,
    /// `[T'×(U+1)×classes]`.
    pub logits: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub aed_weight: f64,
    /// Alignment speedup; `0` trains the decoder offline.
    pub lambda: f64,
    pub label_smoothing: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            aed_weight: 1.0,
            lambda: 0.0,
            label_smoothing: 0.1,
        }
    }
}

pub struct TrainLosses {
    pub rnnt: Var,
    pub aed: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    encoder: Encoder,
    decoder: Decoder,
    joiner: Joiner,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::default();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(config.init_seed));
        let encoder = Encoder::new(&mut params, &mut init, &config);
        let decoder = Decoder::new(&mut params, &mut init, &config, config.kind == ModelKind::Taed);
        let joiner = Joiner::new(&mut params, &mut init, &config);
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            joiner,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        match targets.iter().find(|&&y| y == self.config.bos() || y >= self.config.vocab_size) {
            Some(bad) => Err(Error::Input(format!("target token {bad} is BOS or outside the vocabulary"))),
            None => Ok(()),
        }
    }

    fn with_bos(&self, tokens: &[usize]) -> Vec<usize> {
        let mut prefix = Vec::with_capacity(tokens.len() + 1);
        prefix.push(self.config.bos());
        prefix.extend_from_slice(tokens);
        prefix
    }

    /// Encoder, chunk-synchronised decoder passes and joiner for a target.
    ///
    /// Frame `t` is paired with decoder states computed against `h[0..=δ(t)]`;
    /// the token-only predictor runs once.
    pub fn forward_lattice(&self, f: &mut Fwd, x: &Tensor, targets: &[usize], chunk_frames: usize) -> Result<LatticeForward> {
        self.check_targets(targets)?;
        let h = self.encoder.forward(f, x, chunk_frames, self.config.lookahead_chunks)?;
        let frames = f.g.value(h).rows();
        let schedule = ChunkSchedule::new(chunk_frames, frames);
        let prefix = self.with_bos(targets);
        let hp = self.joiner.project_frames(f, h)?;
        let mut passes = Vec::new();
        let mut blocks = Vec::new();
        if self.decoder.has_cross_attention() {
            for c in 0..schedule.num_chunks() {
                let horizon = schedule.horizon(c);
                let memory = if horizon == frames { h } else { f.g.slice_rows(h, 0, horizon)? };
                let pass = self.decoder.forward(f, &prefix, Some(memory))?;
                let sp = self.joiner.project_states(f, pass.top)?;
                let range = schedule.range(c);
                let frames_c = if range.len() == frames {
                    hp
                } else {
                    f.g.slice_rows(hp, range.start, range.end)?
                };
                blocks.push((frames_c, sp));
                passes.push(ChunkPass {
                    horizon,
                    top: pass.top,
                    cross_weights: pass.cross_weights,
                });
            }
        } else {
            let pass = self.decoder.forward(f, &prefix, None)?;
            let sp = self.joiner.project_states(f, pass.top)?;
            blocks.push((hp, sp));
            passes.push(ChunkPass {
                horizon: frames,
                top: pass.top,
                cross_weights: Vec::new(),
            });
        }
        let flat = self.joiner.combine_blocks(f, &blocks)?;
        let logits = f.g.reshape(flat, &[frames, prefix.len(), self.config.classes()])?;
        Ok(LatticeForward {
            h,
            schedule,
            passes,
            logits,
        })
    }

    /// Per-token transducer loss plus (for the hybrid model) the alignment-
    /// scheduled decoder cross-entropy, combined with `opts.aed_weight`.
    /// With `aed_weight == 0` no decoder-output graph is built.
    pub fn forward_train(&self, f: &mut Fwd, x: &Tensor, targets: &[usize], chunk_frames: usize, opts: &LossOptions) -> Result<TrainLosses> {
        let lattice = self.forward_lattice(f, x, targets, chunk_frames)?;
        let log_probs = f.g.log_softmax(lattice.logits)?;
        let rnnt = f.g.rnnt(log_probs, targets, self.config.blank())?;
        let rnnt = f.g.scale(rnnt, 1.0 / targets.len().max(1) as f64)?;
        let use_aed = self.kind() == ModelKind::Taed && opts.aed_weight != 0.0 && !targets.is_empty();
        let aed = if use_aed {
            let frames = lattice.schedule.frames();
            let align = self.alignment(frames, targets.len(), opts.lambda)?;
            let mut per_horizon = Vec::with_capacity(lattice.passes.len());
            for pass in &lattice.passes {
                let logits = self.joiner.output_projection(f, pass.top)?;
                per_horizon.push(HorizonLogits {
                    horizon: pass.horizon,
                    logits,
                });
            }
            Some(losses::aed_ce_loss(f.g, &per_horizon, targets, &align, opts.label_smoothing)?)
        } else {
            None
        };
        let total = losses::taed_loss_var(f.g, rnnt, aed, opts.aed_weight)?;
        Ok(TrainLosses { rnnt, aed, total })
    }

    /// Decoder alignment for the AED objective: offline for `lambda <= 0`.
    pub fn alignment(&self, frames: usize, tokens: usize, lambda: f64) -> Result<FastAlignment> {
        if lambda <= 0.0 {
            Ok(losses::offline_alignment(frames, tokens))
        } else {
            losses::fast_alignment(frames, tokens, lambda)
        }
    }

    /// Evaluation-mode encoder output.
    pub fn encode(&self, x: &Tensor, chunk_frames: usize) -> Result<EncoderOutput> {
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let h = self.encoder.forward(&mut f, x, chunk_frames, self.config.lookahead_chunks)?;
        Ok(EncoderOutput {
            h: g.value(h).clone(),
            frame_ms: self.config.frame_ms(),
        })
    }

    /// Label-side states for `BOS, y_prefix...`: decoder states against the
    /// visible frames for the hybrid model, predictor states otherwise
    /// (`h_prefix` is then ignored).
    pub fn decode_states(&self, h_prefix: &Tensor, y_prefix: &[usize]) -> Result<DecoderStates> {
        if self.kind() == ModelKind::Transducer {
            return self.predictor_baseline(y_prefix);
        }
        if h_prefix.is_empty() {
            return Err(Error::Input("decoder needs at least one encoder frame".into()));
        }
        self.check_targets(y_prefix)?;
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let memory = f.g.input(h_prefix.clone())?;
        let pass = self.decoder.forward(&mut f, &self.with_bos(y_prefix), Some(memory))?;
        Ok(DecoderStates {
            layers: pass.layers.iter().map(|&v| g.value(v).clone()).collect(),
            top: g.value(pass.top).clone(),
            horizon: Some(h_prefix.rows()),
        })
    }

    /// States of the token-only predictor (baseline transducer).
    pub fn predictor_baseline(&self, y_prefix: &[usize]) -> Result<DecoderStates> {
        if self.decoder.has_cross_attention() {
            return Err(Error::Input("hybrid model has no token-only predictor".into()));
        }
        self.check_targets(y_prefix)?;
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let pass = self.decoder.forward(&mut f, &self.with_bos(y_prefix), None)?;
        Ok(DecoderStates {
            layers: pass.layers.iter().map(|&v| g.value(v).clone()).collect(),
            top: g.value(pass.top).clone(),
            horizon: None,
        })
    }

    /// Joiner logits `[frames×rows×classes]` for frames `h` against states.
    pub fn join(&self, h: &Tensor, states: &DecoderStates) -> Result<Tensor> {
        if h.cols() != states.top.cols() {
            return Err(Error::shape("join", format!("{:?} vs {:?}", h.shape(), states.top.shape())));
        }
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let hv = f.g.input(h.clone())?;
        let sv = f.g.input(states.top.clone())?;
        let hp = self.joiner.project_frames(&mut f, hv)?;
        let sp = self.joiner.project_states(&mut f, sv)?;
        let flat = self.joiner.combine(&mut f, hp, sp)?;
        let out = f.g.reshape(flat, &[h.rows(), states.top.rows(), self.config.classes()])?;
        Ok(g.value(out).clone())
    }

    /// Chunk-synchronised joiner output for a whole utterance: frames of
    /// chunk `c` pair with `states[c]`.
    pub fn join_chunks(&self, enc: &EncoderOutput, schedule: &ChunkSchedule, states: &[DecoderStates]) -> Result<Tensor> {
        if states.len() != schedule.num_chunks() {
            return Err(Error::shape(
                "join",
                format!("{} state sets for {} chunks", states.len(), schedule.num_chunks()),
            ));
        }
        let rows = states[0].top.rows();
        let mut data = Vec::new();
        for (c, s) in states.iter().enumerate() {
            if let Some(hz) = s.horizon {
                if hz < schedule.range(c).end {
                    return Err(Error::Input(format!("states for chunk {c} see only {hz} frames")));
                }
            }
            let range = schedule.range(c);
            let block = Tensor::new(
                vec![range.len(), enc.h.cols()],
                enc.h.data()[range.start * enc.h.cols()..range.end * enc.h.cols()].to_vec(),
            )?;
            data.extend_from_slice(self.join(&block, s)?.data());
        }
        Tensor::new(vec![enc.frames(), rows, self.config.classes()], data)
    }

    /// Vocabulary logits from top-layer decoder states, `[n×classes]`.
    pub fn aed_logits(&self, states: &DecoderStates) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let s = f.g.input(states.top.clone())?;
        let z = self.joiner.output_projection(&mut f, s)?;
        Ok(g.value(z).clone())
    }

    /// Encoder-side joiner projection `W_h h + b`, row-wise.
    pub fn project_frames(&self, h: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let hv = f.g.input(h.clone())?;
        let out = self.joiner.project_frames(&mut f, hv)?;
        Ok(g.value(out).clone())
    }

    /// Label-side joiner projection `W_s s`, row-wise.
    pub fn project_states(&self, s: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let sv = f.g.input(s.clone())?;
        let out = self.joiner.project_states(&mut f, sv)?;
        Ok(g.value(out).clone())
    }

    /// Joiner log-probabilities for one projected frame row and one
    /// projected state row, `classes` values.
    pub fn joint_log_probs(&self, hp_row: &[f64], sp_row: &[f64]) -> Result<Vec<f64>> {
        let d = hp_row.len();
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, &self.params);
        let a = f.g.input(Tensor::new(vec![1, d], hp_row.to_vec())?)?;
        let b = f.g.input(Tensor::new(vec![1, sp_row.len()], sp_row.to_vec())?)?;
        let z = self.joiner.combine(&mut f, a, b)?;
        let lp = f.g.log_softmax(z)?;
        Ok(g.value(lp).data().to_vec())
    }
}
