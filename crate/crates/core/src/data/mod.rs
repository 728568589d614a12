//! Synthetic transduction tasks and their on-disk format.
//!
//! Each source token is rendered as its embedding vector repeated for a
//! random number of raw frames, plus Gaussian noise. The target is the
//! source itself, or the source with every window of `w` tokens reversed.
//! Adjacent source tokens always differ, so every token boundary is visible
//! in the features.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use io::{load, load_vocab, save, save_vocab, vocab_symbols, FORMAT, VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTaskConfig {
    /// Includes BOS at index 0; tokens are drawn from `1..vocab_size`.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Raw frames per source token, inclusive.
    pub duration_range: [usize; 2],
    pub noise_std: f64,
    /// `0` copies the source; `w > 0` reverses each window of `w` tokens.
    pub reorder_window: usize,
    /// Source tokens per utterance, inclusive.
    pub utterance_length_range: [usize; 2],
    pub raw_frame_ms: f64,
    /// Seeds the token embedding table shared by every split of the task.
    pub task_seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            feature_dim: 16,
            duration_range: [6, 10],
            noise_std: 0.1,
            reorder_window: 0,
            utterance_length_range: [3, 8],
            raw_frame_ms: 10.0,
            task_seed: 0,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let [d_min, d_max] = self.duration_range;
        let [l_min, l_max] = self.utterance_length_range;
        let problem = if self.vocab_size < 4 {
            "vocab_size must be at least 4"
        } else if self.feature_dim == 0 {
            "feature_dim must be positive"
        } else if d_min < 1 || d_min > d_max {
            "duration_range needs 1 <= min <= max"
        } else if l_min < 1 || l_min > l_max {
            "utterance_length_range needs 1 <= min <= max"
        } else if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            "noise_std must be finite and >= 0"
        } else if !(self.raw_frame_ms > 0.0) {
            "raw_frame_ms must be positive"
        } else {
            return Ok(());
        };
        Err(Error::Config(problem.into()))
    }

    /// `vocab_size × feature_dim` standard-normal embedding table.
    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        rng.set_stream(u64::MAX);
        (0..self.vocab_size)
            .map(|_| (0..self.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    pub fn transform(&self, source: &[usize]) -> Vec<usize> {
        reverse_windows(source, self.reorder_window)
    }
}

/// Reverses each consecutive window of `w` tokens (the last may be short).
pub fn reverse_windows<T: Clone>(tokens: &[T], w: usize) -> Vec<T> {
    if w <= 1 {
        return tokens.to_vec();
    }
    tokens
        .chunks(w)
        .flat_map(|c| c.iter().rev().cloned())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T×feature_dim]`, values representable in `f32`.
    pub features: Tensor,
    pub source_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthTaskConfig,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn longest_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.features.rows()).max().unwrap_or(0)
    }
}

/// Utterance `index` of the stream for `seed`; independent of other indices.
pub fn generate_one(config: &SynthTaskConfig, table: &[Vec<f64>], seed: u64, index: usize) -> Result<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let [l_min, l_max] = config.utterance_length_range;
    let [d_min, d_max] = config.duration_range;
    let len = rng.random_range(l_min..=l_max);
    let mut source: Vec<usize> = Vec::with_capacity(len);
    for _ in 0..len {
        let tok = match source.last() {
            None => rng.random_range(1..config.vocab_size),
            Some(&prev) => {
                let r = rng.random_range(1..config.vocab_size - 1);
                if r >= prev {
                    r + 1
                } else {
                    r
                }
            }
        };
        source.push(tok);
    }
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::new();
    let mut frames = 0;
    for &tok in &source {
        let dur = rng.random_range(d_min..=d_max);
        frames += dur;
        for _ in 0..dur {
            for &e in &table[tok] {
                let v = if config.noise_std > 0.0 { e + noise.sample(&mut rng) } else { e };
                data.push(v as f32 as f64);
            }
        }
    }
    Ok(Utterance {
        id: format!("utt{index:06}"),
        features: Tensor::new(vec![frames, config.feature_dim], data)?,
        target_tokens: config.transform(&source),
        source_tokens: source,
    })
}

pub fn generate(config: &SynthTaskConfig, count: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let table = config.embeddings();
    let utterances = (0..count)
        .map(|i| generate_one(config, &table, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        utterances,
    })
}
