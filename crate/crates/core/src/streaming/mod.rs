//! Greedy transducer decoding interleaved with chunk arrivals.

mod trace;

use crate::error::{Error, Result};
use crate::model::{ChunkSchedule, DecoderStates, EncoderOutput, Model, OFFLINE_CHUNK};
use crate::numeric::Tensor;

pub use trace::{EventKind, StreamingTrace, TraceEvent};

pub const DEFAULT_MAX_SYMBOLS_PER_FRAME: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOptions {
    /// Encoder frames per chunk; values at or above the utterance length
    /// decode offline.
    pub chunk_frames: usize,
    /// Blank penalty subtracted from the blank log-probability.
    pub tau: f64,
    pub max_symbols_per_frame: usize,
    /// Keep every decoder-state set used during the search.
    pub record_states: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            chunk_frames: OFFLINE_CHUNK,
            tau: 0.0,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
            record_states: false,
        }
    }
}

/// Decoder states the search evaluated, keyed by the prefix they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedStates {
    pub chunk: usize,
    pub prefix: Vec<usize>,
    pub states: DecoderStates,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub tokens: Vec<usize>,
    pub trace: StreamingTrace,
    /// Encoder frame at which each token was emitted.
    pub emit_frames: Vec<usize>,
    /// Frames where the per-frame emission cap stopped the search.
    pub cap_hits: usize,
    pub recorded: Vec<RecordedStates>,
}

/// `e` with its blank entry lowered by `tau`.
pub fn apply_blank_penalty(e: &[f64], blank: usize, tau: f64) -> Result<Vec<f64>> {
    if blank >= e.len() {
        return Err(Error::shape("apply_blank_penalty", format!("blank {blank} outside {} entries", e.len())));
    }
    let mut out = e.to_vec();
    out[blank] -= tau;
    Ok(out)
}

/// First index of the maximum, never `skip` (NaN never wins).
fn argmax(v: &[f64], skip: usize) -> usize {
    let mut best = if skip == 0 { 1 } else { 0 };
    for (i, &x) in v.iter().enumerate() {
        if i != skip && x > v[best] {
            best = i;
        }
    }
    best
}

struct Search<'a> {
    model: &'a Model,
    opts: &'a StreamOptions,
    blank: usize,
    bos: usize,
    out: StreamOutput,
}

impl Search<'_> {
    fn states(&mut self, chunk: usize, h_prefix: &Tensor) -> Result<(DecoderStates, Tensor)> {
        let states = self.model.decode_states(h_prefix, &self.out.tokens)?;
        let last = states.top.rows() - 1;
        let row = Tensor::new(vec![1, states.top.cols()], states.top.row(last).to_vec())?;
        let sp = self.model.project_states(&row)?;
        if self.opts.record_states {
            self.out.recorded.push(RecordedStates {
                chunk,
                prefix: self.out.tokens.clone(),
                states: states.clone(),
            });
        }
        Ok((states, sp))
    }

    /// Greedy search over the frames of one finalised chunk.
    fn run_chunk(&mut self, chunk: usize, enc: &EncoderOutput, schedule: &ChunkSchedule, ms: f64) -> Result<()> {
        let h_prefix = enc.prefix(schedule.horizon(chunk))?;
        let range = schedule.range(chunk);
        let d = enc.h.cols();
        let frames = Tensor::new(vec![range.len(), d], enc.h.data()[range.start * d..range.end * d].to_vec())?;
        let hp = self.model.project_frames(&frames)?;
        let (_, mut sp) = self.states(chunk, &h_prefix)?;
        for (i, t) in range.enumerate() {
            let mut emitted = 0;
            loop {
                let e = self.model.joint_log_probs(hp.row(i), sp.data())?;
                let e = apply_blank_penalty(&e, self.blank, self.opts.tau)?;
                if !e.iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY) {
                    return Err(Error::NonFinite("decoder log-probabilities"));
                }
                let k = argmax(&e, self.bos);
                if k == self.blank {
                    break;
                }
                if emitted == self.opts.max_symbols_per_frame {
                    self.out.cap_hits += 1;
                    break;
                }
                self.out.tokens.push(k);
                self.out.emit_frames.push(t);
                self.out.trace.write(k, ms);
                emitted += 1;
                sp = self.states(chunk, &h_prefix)?.1;
            }
        }
        Ok(())
    }
}

/// Streams `x` chunk by chunk. A chunk's frames are decoded once its
/// lookahead chunks have arrived (or the input ended); tokens are stamped
/// with the source consumed at that point. BOS is never emitted.
pub fn stream_decode(model: &Model, x: &Tensor, opts: &StreamOptions) -> Result<StreamOutput> {
    if !(opts.tau >= 0.0) {
        return Err(Error::Config(format!("blank penalty must be >= 0, got {}", opts.tau)));
    }
    if opts.chunk_frames == 0 {
        return Err(Error::Config("chunk_frames must be positive".into()));
    }
    if x.shape().len() != 2 || x.shape()[1] != model.config().feature_dim {
        return Err(Error::shape(
            "stream_decode",
            format!("expected [T×{}], got {:?}", model.config().feature_dim, x.shape()),
        ));
    }
    let cfg = model.config();
    let raw = x.rows();
    let frames = cfg.encoder_frames(raw);
    let schedule = ChunkSchedule::new(opts.chunk_frames, frames);
    let raw_per_chunk = schedule.chunk_frames() * cfg.downsample_factor;
    let last = schedule.num_chunks() - 1;
    let lookahead = cfg.lookahead_chunks;
    let mut search = Search {
        model,
        opts,
        blank: cfg.blank(),
        bos: cfg.bos(),
        out: StreamOutput {
            tokens: Vec::new(),
            trace: StreamingTrace::new(raw as f64 * cfg.raw_frame_ms),
            emit_frames: Vec::new(),
            cap_hits: 0,
            recorded: Vec::new(),
        },
    };
    let mut next = 0;
    for c in 0..=last {
        let raw_end = ((c + 1) * raw_per_chunk).min(raw);
        let ms = raw_end as f64 * cfg.raw_frame_ms;
        search.out.trace.read(ms);
        let ready = if c == last { last + 1 } else { (c + 1).saturating_sub(lookahead) };
        if ready <= next {
            continue;
        }
        let visible = Tensor::new(vec![raw_end, x.cols()], x.data()[..raw_end * x.cols()].to_vec())?;
        let enc = model.encode(&visible, opts.chunk_frames)?;
        let sub = ChunkSchedule::new(opts.chunk_frames, enc.frames());
        for j in next..ready {
            search.run_chunk(j, &enc, &sub, ms)?;
        }
        next = ready;
    }
    Ok(search.out)
}

/// Greedy decoding with the whole utterance visible.
pub fn offline_decode(model: &Model, x: &Tensor, tau: f64) -> Result<StreamOutput> {
    stream_decode(
        model,
        x,
        &StreamOptions {
            tau,
            ..Default::default()
        },
    )
}
