//! Minibatch training, checkpoint selection and evaluation drivers.

mod eval;
mod optim;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::model::{Checkpoint, Fwd, LossOptions, Model, ModelConfig, ModelKind};
use crate::numeric::Graph;

pub use eval::{
    chunk_table, evaluate, inspect_alignment, parallel_map, sweep_blank_penalty, sweep_chunk, AlignmentInspection, ChunkRow,
    DecodeMode, EvalOptions, EvalReport, Quality, TauRow, TauSweep, UtteranceRow,
};
pub use optim::{clip_global_norm, learning_rate, Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub batch_utterances: usize,
    pub max_updates: usize,
    pub aed_weight: f64,
    /// Alignment speedup for the decoder objective; `0` is offline.
    pub lambda: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Validation and checkpoint interval in updates.
    pub checkpoint_every: usize,
    pub keep_best_k: usize,
    /// Validation intervals without improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
    /// Dev utterances greedily decoded at each validation (0 = all).
    pub validation_decode: usize,
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            betas: [0.9, 0.98],
            adam_eps: 1e-9,
            warmup_steps: 200,
            batch_utterances: 8,
            max_updates: 2000,
            aed_weight: 1.0,
            lambda: 0.0,
            label_smoothing: 0.1,
            dropout: 0.1,
            seed: 0,
            checkpoint_every: 100,
            keep_best_k: 10,
            patience: 20,
            grad_clip: 5.0,
            validation_decode: 0,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let problem = if !(self.lr > 0.0 && self.lr.is_finite()) {
            "lr must be positive"
        } else if self.keep_best_k == 0 {
            "keep_best_k must be at least 1"
        } else if self.batch_utterances == 0 {
            "batch_utterances must be positive"
        } else if self.checkpoint_every == 0 {
            "checkpoint_every must be positive"
        } else if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            "betas must lie in [0, 1)"
        } else if !(0.0..1.0).contains(&self.dropout) {
            "dropout must lie in [0, 1)"
        } else if !(0.0..1.0).contains(&self.label_smoothing) {
            "label_smoothing must lie in [0, 1)"
        } else if !(self.aed_weight >= 0.0) {
            "aed_weight must be >= 0"
        } else {
            return Ok(());
        };
        Err(Error::Config(problem.into()))
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            aed_weight: self.aed_weight,
            lambda: self.lambda,
            label_smoothing: self.label_smoothing,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub rnnt: f64,
    pub aed: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub loss: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub validation_loss: f64,
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// The retained best checkpoints, best first.
    pub checkpoints: Vec<CheckpointRecord>,
    pub stopped_early: bool,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

pub struct TrainOutput {
    /// Average of the retained best checkpoints.
    pub model: Model,
    pub last: Model,
    pub manifest: RunManifest,
    pub best: Vec<Checkpoint>,
}

/// Mean validation losses in evaluation mode.
pub fn validation_loss(model: &Model, set: &Dataset, opts: &LossOptions) -> Result<f64> {
    let chunk = model.config().chunk_frames;
    let losses = parallel_map(&set.utterances, |u| {
        let mut g = Graph::new();
        let mut f = Fwd::eval(&mut g, model.params());
        let l = model.forward_train(&mut f, &u.features, &u.target_tokens, chunk, opts)?;
        Ok(g.value(l.total).item())
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

struct Batch {
    grads: Vec<Vec<f64>>,
    rnnt: f64,
    aed: Option<f64>,
    total: f64,
}

fn batch_gradient(model: &Model, set: &Dataset, ids: &[usize], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let opts = cfg.loss_options();
    let chunk = model.config().chunk_frames;
    let mut grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    let (mut rnnt, mut aed, mut total) = (0.0, None::<f64>, 0.0);
    let scale = 1.0 / ids.len() as f64;
    for &i in ids {
        let u = &set.utterances[i];
        let mut g = Graph::new();
        let mut f = Fwd::train(&mut g, model.params(), cfg.dropout, rng);
        let l = model.forward_train(&mut f, &u.features, &u.target_tokens, chunk, &opts)?;
        let bound: Vec<_> = f.bound().collect();
        rnnt += g.value(l.rnnt).item() * scale;
        if let Some(a) = l.aed {
            *aed.get_or_insert(0.0) += g.value(a).item() * scale;
        }
        total += g.value(l.total).item() * scale;
        let mut back = g.backward(l.total)?;
        for (p, v) in bound {
            if let Some(d) = back.take(v) {
                for (acc, x) in grads[p].iter_mut().zip(d) {
                    *acc += x * scale;
                }
            }
        }
    }
    Ok(Batch { grads, rnnt, aed, total })
}

/// Trains `model` in place, keeping the `keep_best_k` checkpoints with the
/// lowest validation loss (earlier step wins ties), and returns their
/// average. Checkpoints and the manifest go under `out_dir` when given.
pub fn train(mut model: Model, cfg: &TrainConfig, train_set: &Dataset, dev: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.is_empty() || dev.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.betas, cfg.adam_eps, model.params().tensors());
    let mut manifest = RunManifest {
        model_config: model.config().clone(),
        train_config: cfg.clone(),
        steps: Vec::new(),
        validations: Vec::new(),
        checkpoints: Vec::new(),
        stopped_early: false,
    };
    let mut best: Vec<(f64, usize, Checkpoint, Option<PathBuf>)> = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut best_loss = f64::INFINITY;
    let mut since_best = 0;
    let dev_decode = Dataset {
        config: dev.config.clone(),
        utterances: match cfg.validation_decode {
            0 => dev.utterances.clone(),
            n => dev.utterances.iter().take(n).cloned().collect(),
        },
    };
    let eval_opts = EvalOptions::offline();
    for step in 1..=cfg.max_updates {
        let mut ids = Vec::with_capacity(cfg.batch_utterances);
        while ids.len() < cfg.batch_utterances {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            ids.push(order[cursor]);
            cursor += 1;
        }
        let mut batch = batch_gradient(&model, train_set, &ids, cfg, &mut rng)?;
        if !batch.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {}", batch.total),
            });
        }
        let grad_norm = clip_global_norm(&mut batch.grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let lr = learning_rate(cfg.lr, cfg.warmup_steps, step);
        opt.update(model.params_mut().tensors_mut(), &batch.grads, lr);
        manifest.steps.push(StepRecord {
            step,
            rnnt: batch.rnnt,
            aed: batch.aed,
            total: batch.total,
            lr,
            grad_norm,
        });
        if step % cfg.checkpoint_every != 0 && step != cfg.max_updates {
            continue;
        }
        let loss = validation_loss(&model, dev, &cfg.loss_options())?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("validation loss {loss}"),
            });
        }
        let wer = evaluate(&model, &dev_decode, &eval_opts)?.wer;
        manifest.validations.push(ValidationRecord { step, loss, wer });
        if cfg.verbose {
            eprintln!("step {step:>6}  train {:.4}  dev loss {loss:.4}  dev wer {:.2}%", batch.total, 100.0 * wer);
        }
        let mut ck = Checkpoint::from_model(&model);
        ck.meta.step = Some(step);
        ck.meta.validation_loss = Some(loss);
        let path = match out_dir {
            Some(dir) => {
                let p = dir.join(format!("step{step:07}.ckpt"));
                ck.save(&p)?;
                Some(p)
            }
            None => None,
        };
        best.push((loss, step, ck, path));
        best.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, _, _, p) in best.drain(cfg.keep_best_k.min(best.len())..) {
            if let Some(p) = p {
                std::fs::remove_file(p)?;
            }
        }
        if loss < best_loss {
            best_loss = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                manifest.stopped_early = true;
                break;
            }
        }
    }
    manifest.checkpoints = best
        .iter()
        .map(|(loss, step, _, path)| CheckpointRecord {
            step: *step,
            validation_loss: *loss,
            path: path.clone(),
        })
        .collect();
    let best: Vec<Checkpoint> = best.into_iter().map(|b| b.2).collect();
    let averaged = Checkpoint::average(&best)?;
    if let Some(dir) = out_dir {
        averaged.save(&dir.join("averaged.ckpt"))?;
        Checkpoint::from_model(&model).save(&dir.join("last.ckpt"))?;
        manifest.save(&dir.join("manifest.json"))?;
    }
    Ok(TrainOutput {
        model: averaged.to_model()?,
        last: model,
        manifest,
        best,
    })
}

/// Copies every tensor whose name starts with `prefix` from `source`.
pub fn load_pretrained(model: &mut Model, source: &Checkpoint, prefix: &str) -> Result<usize> {
    let picked: Vec<_> = source.tensors.iter().filter(|t| t.name.starts_with(prefix)).collect();
    if picked.is_empty() {
        return Err(Error::Input(format!("checkpoint has no tensors under {prefix:?}")));
    }
    model.params_mut().load_some(
        picked
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.iter().map(|&v| v as f64).collect())),
    )?;
    Ok(picked.len())
}

/// The baseline is trained on the transducer loss alone.
pub fn effective_config(kind: ModelKind, cfg: &TrainConfig) -> TrainConfig {
    match kind {
        ModelKind::Taed => cfg.clone(),
        ModelKind::Transducer => TrainConfig {
            aed_weight: 0.0,
            ..cfg.clone()
        },
    }
}
