use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use taed::data::{self, SynthTaskConfig};
use taed::metrics;
use taed::model::{Checkpoint, Model, ModelConfig, ModelKind};
use taed::train::{self, DecodeMode, EvalOptions, OptimizerKind, Quality, TrainConfig};
use taed::{Error, Result};

#[derive(Parser)]
#[command(name = "taed", version, about = "Train and evaluate streaming transducers on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its vocabulary file.
    GenerateData(GenerateArgs),
    /// Train a model; writes checkpoints, the averaged model and a manifest.
    Train(TrainArgs),
    /// Offline greedy evaluation.
    Eval(EvalArgs),
    /// Chunk-synchronised streaming evaluation.
    StreamEval(StreamEvalArgs),
    /// Grid search over the blank penalty.
    SweepTau(SweepTauArgs),
    /// Quality and latency for several chunk sizes.
    SweepChunk(SweepChunkArgs),
    /// Element-wise mean of checkpoints.
    AverageCkpt(AverageArgs),
    /// Print decoder alignment schedules next to lattice Viterbi paths.
    InspectAlignment(InspectArgs),
}

/// Structured config file: `[model]`, `[train]` and `[task]` tables.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: ModelConfig,
    train: TrainConfig,
    task: SynthTaskConfig,
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the vocabulary, one symbol per line.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    reorder_window: Option<usize>,
    #[arg(long)]
    task_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Output directory for checkpoints and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// taed | transducer
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long)]
    lookahead_chunks: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam | radam
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    batch_utterances: Option<usize>,
    #[arg(long)]
    aed_weight: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    keep_best_k: Option<usize>,
    /// Initialise parameters under `--init-prefix` from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value = "encoder.")]
    init_prefix: String,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Blank penalty.
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long, default_value_t = taed::streaming::DEFAULT_MAX_SYMBOLS_PER_FRAME)]
    max_symbols_per_frame: usize,
    /// Write `<prefix>.txt` and `<prefix>.jsonl` reports.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for one trace file per utterance.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct StreamEvalArgs {
    #[command(flatten)]
    decode: DecodeArgs,
    #[command(flatten)]
    chunk: ChunkArg,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ChunkArg {
    /// Encoder frames per chunk.
    #[arg(long)]
    chunk_frames: Option<usize>,
    /// Chunk length in source milliseconds (rounded up to whole frames).
    #[arg(long)]
    chunk_ms: Option<f64>,
}

impl ChunkArg {
    fn frames(&self, model: &Model) -> Result<usize> {
        match (self.chunk_frames, self.chunk_ms) {
            (Some(n), _) if n > 0 => Ok(n),
            (None, Some(ms)) if ms > 0.0 => Ok((ms / model.config().frame_ms()).ceil() as usize),
            _ => Err(Error::Config("chunk size must be positive".into())),
        }
    }
}

#[derive(Args)]
struct SweepTauArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Decode in streaming mode with this many frames per chunk.
    #[arg(long)]
    chunk_frames: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    max: f64,
    #[arg(long, default_value_t = 0.5)]
    step: f64,
    /// wer | bleu
    #[arg(long, default_value = "wer")]
    metric: String,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepChunkArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated encoder-frame chunk sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4, 8, 16])]
    chunks: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    tau: f64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AverageArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 3)]
    count: usize,
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.to_model()
}

fn write_report(prefix: Option<&Path>, table: &str, jsonl: &str) -> Result<()> {
    print!("{table}");
    if let Some(p) = prefix {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(p.with_extension("txt"), table)?;
        std::fs::write(p.with_extension("jsonl"), jsonl)?;
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut task = read_config(a.config.as_deref())?.task;
    if let Some(v) = a.vocab_size {
        task.vocab_size = v;
    }
    if let Some(v) = a.feature_dim {
        task.feature_dim = v;
    }
    if let Some(v) = a.noise_std {
        task.noise_std = v;
    }
    if let Some(v) = a.reorder_window {
        task.reorder_window = v;
    }
    if let Some(v) = a.task_seed {
        task.task_seed = v;
    }
    let ds = data::generate(&task, a.count, a.seed)?;
    data::save(&ds, &a.out)?;
    if let Some(v) = a.vocab {
        data::save_vocab(&data::vocab_symbols(task.vocab_size), &v)?;
    }
    println!("wrote {} utterances to {}", ds.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let (mut mc, mut tc) = (file.model, file.train);
    if let Some(v) = a.model {
        mc.kind = v;
    }
    if let Some(v) = a.chunk_frames {
        mc.chunk_frames = v;
    }
    if let Some(v) = a.lookahead_chunks {
        mc.lookahead_chunks = v;
    }
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { tc.$f = v; })* };
    }
    set!(lr, optimizer, max_updates, batch_utterances, aed_weight, lambda, seed, keep_best_k);
    tc.verbose = !a.quiet;
    let train_set = data::load(&a.train)?;
    let dev = data::load(&a.dev)?;
    if train_set.config.feature_dim != mc.feature_dim || train_set.config.vocab_size != mc.vocab_size {
        return Err(Error::Config(format!(
            "model expects feature_dim {} and vocab_size {}, data has {} and {}",
            mc.feature_dim, mc.vocab_size, train_set.config.feature_dim, train_set.config.vocab_size
        )));
    }
    let mut model = Model::new(mc)?;
    if let Some(p) = &a.init {
        let n = train::load_pretrained(&mut model, &Checkpoint::load(p)?, &a.init_prefix)?;
        eprintln!("initialised {n} tensors from {}", p.display());
    }
    let tc = train::effective_config(model.kind(), &tc);
    let out = train::train(model, &tc, &train_set, &dev, Some(&a.out))?;
    let best = &out.manifest.checkpoints;
    println!(
        "averaged {} checkpoints (best step {}, dev loss {:.4}) into {}",
        best.len(),
        best[0].step,
        best[0].validation_loss,
        a.out.join("averaged.ckpt").display()
    );
    Ok(())
}

fn decode(d: &DecodeArgs, mode: DecodeMode) -> Result<()> {
    let model = load_model(&d.ckpt)?;
    let set = data::load(&d.data)?;
    let opts = EvalOptions {
        mode,
        tau: d.tau,
        max_symbols_per_frame: d.max_symbols_per_frame,
    };
    let report = train::evaluate(&model, &set, &opts)?;
    if let Some(dir) = &d.traces {
        for (row, trace) in report.rows.iter().zip(&report.traces) {
            trace.save(&dir.join(format!("{}.jsonl", row.id)))?;
        }
    }
    write_report(d.report.as_deref(), &report.table(), &report.jsonl()?)
}

fn sweep_tau(a: SweepTauArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let set = data::load(&a.data)?;
    let quality = match a.metric.as_str() {
        "wer" => Quality::Wer,
        "bleu" => Quality::Bleu,
        other => return Err(Error::Config(format!("unknown metric {other:?} (wer | bleu)"))),
    };
    let base = match a.chunk_frames {
        Some(n) => EvalOptions::streaming(n, 0.0),
        None => EvalOptions::offline(),
    };
    let sweep = train::sweep_blank_penalty(&model, &set, &base, a.max, a.step, quality)?;
    write_report(a.report.as_deref(), &sweep.table(), &metrics::to_jsonl(&sweep.rows)?)
}

fn sweep_chunk(a: SweepChunkArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let set = data::load(&a.data)?;
    let rows = train::sweep_chunk(&model, &set, &a.chunks, a.tau)?;
    write_report(a.report.as_deref(), &train::chunk_table(&rows), &metrics::to_jsonl(&rows)?)
}

fn average(a: AverageArgs) -> Result<()> {
    let avg = Checkpoint::average_files(&a.checkpoints)?;
    avg.save(&a.out)?;
    println!("averaged {} checkpoints into {}", a.checkpoints.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let set = data::load(&a.data)?;
    for u in set.utterances.iter().take(a.count) {
        println!("{}", train::inspect_alignment(&model, u, a.lambda)?.table());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => decode(&a.decode, DecodeMode::Offline),
        Command::StreamEval(a) => {
            let model = load_model(&a.decode.ckpt)?;
            let chunk_frames = a.chunk.frames(&model)?;
            decode(&a.decode, DecodeMode::Streaming { chunk_frames })
        }
        Command::SweepTau(a) => sweep_tau(a),
        Command::SweepChunk(a) => sweep_chunk(a),
        Command::AverageCkpt(a) => average(a),
        Command::InspectAlignment(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                ref e if e.is_numeric() => 3,
                _ => 1,
            })
        }
    }
}
