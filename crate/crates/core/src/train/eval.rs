use serde::Serialize;

use crate::data::{Dataset, Utterance};
use crate::error::Result;
use crate::losses::{FastAlignment, Lattice};
use crate::metrics::{self, format_table, LatencyReport};
use crate::model::{Fwd, Model};
use crate::numeric::{log_softmax, Graph};
use crate::streaming::{stream_decode, StreamOptions, StreamingTrace, DEFAULT_MAX_SYMBOLS_PER_FRAME};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    Offline,
    Streaming { chunk_frames: usize },
}

/// Which quality score drives a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Wer,
    Bleu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: DecodeMode,
    pub tau: f64,
    pub max_symbols_per_frame: usize,
}

impl EvalOptions {
    pub fn offline() -> Self {
        Self {
            mode: DecodeMode::Offline,
            tau: 0.0,
            max_symbols_per_frame: DEFAULT_MAX_SYMBOLS_PER_FRAME,
        }
    }

    pub fn streaming(chunk_frames: usize, tau: f64) -> Self {
        Self {
            mode: DecodeMode::Streaming { chunk_frames },
            tau,
            ..Self::offline()
        }
    }

    fn stream_options(&self) -> StreamOptions {
        StreamOptions {
            chunk_frames: match self.mode {
                DecodeMode::Offline => crate::model::OFFLINE_CHUNK,
                DecodeMode::Streaming { chunk_frames } => chunk_frames,
            },
            tau: self.tau,
            max_symbols_per_frame: self.max_symbols_per_frame,
            record_states: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceRow {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub wer: f64,
    pub cap_hits: usize,
    /// Lagging metrics are reported for streaming decodes only.
    pub al: Option<f64>,
    pub laal: Option<f64>,
    pub dal: Option<f64>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub mode: DecodeMode,
    pub chunk_ms: Option<f64>,
    pub tau: f64,
    pub utterances: usize,
    pub wer: f64,
    pub bleu: f64,
    pub mean_tokens: f64,
    pub cap_hits: usize,
    /// Corpus latency; offline decoding only reports `ap`.
    pub al: Option<f64>,
    pub laal: Option<f64>,
    pub dal: Option<f64>,
    pub ap: f64,
    #[serde(skip)]
    pub rows: Vec<UtteranceRow>,
    #[serde(skip)]
    pub traces: Vec<StreamingTrace>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
        let mut rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.id.clone(),
                    r.reference.len().to_string(),
                    r.hypothesis.len().to_string(),
                    format!("{:.2}", 100.0 * r.wer),
                    fmt(r.al),
                    fmt(r.laal),
                    format!("{:.3}", r.ap),
                    fmt(r.dal),
                ]
            })
            .collect();
        rows.push(vec![
            "corpus".into(),
            String::new(),
            format!("{:.2}", self.mean_tokens),
            format!("{:.2}", 100.0 * self.wer),
            fmt(self.al),
            fmt(self.laal),
            format!("{:.3}", self.ap),
            fmt(self.dal),
        ]);
        let mut out = format_table(&["id", "ref", "hyp", "wer%", "al_ms", "laal_ms", "ap", "dal_ms"], &rows);
        out.push_str(&format!("BLEU {:.2}\n", self.bleu));
        out
    }

    /// Per-utterance records followed by the corpus record.
    pub fn jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            kind: &'static str,
            #[serde(flatten)]
            row: &'a UtteranceRow,
        }
        #[derive(Serialize)]
        struct Corpus<'a> {
            kind: &'static str,
            #[serde(flatten)]
            report: &'a EvalReport,
        }
        let mut out = metrics::to_jsonl(
            &self
                .rows
                .iter()
                .map(|row| Row { kind: "utterance", row })
                .collect::<Vec<_>>(),
        )?;
        out.push_str(&serde_json::to_string(&Corpus {
            kind: "corpus",
            report: self,
        })?);
        out.push('\n');
        Ok(out)
    }
}

/// Maps `f` over `items` on a bounded pool of scoped threads, keeping order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .map(|chunk| s.spawn(|| chunk.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Decodes every utterance and scores quality and latency.
pub fn evaluate(model: &Model, set: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    let sopts = opts.stream_options();
    let outputs = parallel_map(&set.utterances, |u| stream_decode(model, &u.features, &sopts))?;
    let refs: Vec<Vec<usize>> = set.utterances.iter().map(|u| u.target_tokens.clone()).collect();
    let hyps: Vec<Vec<usize>> = outputs.iter().map(|o| o.tokens.clone()).collect();
    let traces: Vec<StreamingTrace> = outputs.iter().map(|o| o.trace.clone()).collect();
    let lat = LatencyReport::new(&traces, &refs.iter().map(Vec::len).collect::<Vec<_>>())?;
    let streaming = matches!(opts.mode, DecodeMode::Streaming { .. });
    let rows = set
        .utterances
        .iter()
        .zip(&outputs)
        .zip(&lat.per_utterance)
        .map(|((u, o), l)| UtteranceRow {
            id: u.id.clone(),
            reference: u.target_tokens.clone(),
            hypothesis: o.tokens.clone(),
            wer: metrics::wer(&u.target_tokens, &o.tokens),
            cap_hits: o.cap_hits,
            al: streaming.then_some(l.al),
            laal: streaming.then_some(l.laal),
            dal: streaming.then_some(l.dal),
            ap: l.ap,
        })
        .collect();
    let chunk_ms = match opts.mode {
        DecodeMode::Streaming { chunk_frames } => Some(chunk_frames as f64 * model.config().frame_ms()),
        DecodeMode::Offline => None,
    };
    Ok(EvalReport {
        mode: opts.mode,
        chunk_ms,
        tau: opts.tau,
        utterances: set.len(),
        wer: metrics::corpus_wer(&refs, &hyps),
        bleu: metrics::bleu(&refs, &hyps),
        mean_tokens: hyps.iter().map(Vec::len).sum::<usize>() as f64 / hyps.len().max(1) as f64,
        cap_hits: outputs.iter().map(|o| o.cap_hits).sum(),
        al: streaming.then_some(lat.mean.al),
        laal: streaming.then_some(lat.mean.laal),
        dal: streaming.then_some(lat.mean.dal),
        ap: lat.mean.ap,
        rows,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauRow {
    pub tau: f64,
    pub wer: f64,
    pub bleu: f64,
    pub mean_tokens: f64,
    pub al: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauSweep {
    pub quality: Quality,
    pub best_tau: f64,
    pub rows: Vec<TauRow>,
}

impl TauSweep {
    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{:.1}", r.tau),
                    format!("{:.2}", 100.0 * r.wer),
                    format!("{:.2}", r.bleu),
                    format!("{:.3}", r.mean_tokens),
                    r.al.map_or("-".into(), |a| format!("{a:.1}")),
                ]
            })
            .collect();
        let mut out = format_table(&["tau", "wer%", "bleu", "tokens", "al_ms"], &rows);
        out.push_str(&format!("best tau {:.1} by {:?}\n", self.best_tau, self.quality));
        out
    }
}

/// Evaluates `tau = 0, step, 2·step, …, max` and picks the best by `quality`
/// (the smaller `tau` wins ties).
pub fn sweep_blank_penalty(model: &Model, dev: &Dataset, base: &EvalOptions, max: f64, step: f64, quality: Quality) -> Result<TauSweep> {
    if !(step > 0.0) || !(max >= 0.0) {
        return Err(crate::Error::Config(format!("bad tau grid: max {max}, step {step}")));
    }
    let n = (max / step + 1e-9).floor() as usize;
    let mut rows = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let tau = i as f64 * step;
        let r = evaluate(model, dev, &EvalOptions { tau, ..base.clone() })?;
        rows.push(TauRow {
            tau,
            wer: r.wer,
            bleu: r.bleu,
            mean_tokens: r.mean_tokens,
            al: r.al,
        });
    }
    let score = |r: &TauRow| match quality {
        Quality::Wer => r.wer,
        Quality::Bleu => -r.bleu,
    };
    let best = rows
        .iter()
        .fold(None::<&TauRow>, |b, r| match b {
            Some(b) if score(b) <= score(r) => Some(b),
            _ => Some(r),
        })
        .expect("grid has at least one point");
    Ok(TauSweep {
        quality,
        best_tau: best.tau,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkRow {
    pub chunk_frames: usize,
    pub chunk_ms: f64,
    pub wer: f64,
    pub bleu: f64,
    pub al: f64,
    pub laal: f64,
    pub ap: f64,
    pub dal: f64,
}

/// One quality/latency point per chunk size.
pub fn sweep_chunk(model: &Model, set: &Dataset, chunks: &[usize], tau: f64) -> Result<Vec<ChunkRow>> {
    chunks
        .iter()
        .map(|&c| {
            let r = evaluate(model, set, &EvalOptions::streaming(c, tau))?;
            Ok(ChunkRow {
                chunk_frames: c,
                chunk_ms: c as f64 * model.config().frame_ms(),
                wer: r.wer,
                bleu: r.bleu,
                al: r.al.unwrap_or(0.0),
                laal: r.laal.unwrap_or(0.0),
                ap: r.ap,
                dal: r.dal.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn chunk_table(rows: &[ChunkRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.chunk_frames.to_string(),
                format!("{:.0}", r.chunk_ms),
                format!("{:.2}", 100.0 * r.wer),
                format!("{:.2}", r.bleu),
                format!("{:.1}", r.al),
                format!("{:.1}", r.laal),
                format!("{:.3}", r.ap),
                format!("{:.1}", r.dal),
            ]
        })
        .collect();
    format_table(&["chunk", "chunk_ms", "wer%", "bleu", "al_ms", "laal_ms", "ap", "dal_ms"], &body)
}

/// Decoder alignment schedule next to the most likely lattice path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentInspection {
    pub id: String,
    pub frames: usize,
    pub targets: Vec<usize>,
    pub alignment: FastAlignment,
    /// Encoder frame at which the Viterbi path emits each target token.
    pub best_path: Vec<usize>,
}

impl AlignmentInspection {
    pub fn table(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.targets.len())
            .map(|u| {
                vec![
                    (u + 1).to_string(),
                    self.targets[u].to_string(),
                    self.alignment.timesteps[u].to_string(),
                    self.best_path[u].to_string(),
                ]
            })
            .collect();
        format!(
            "{} ({} frames, lambda {})\n{}",
            self.id,
            self.frames,
            self.alignment.lambda,
            format_table(&["u", "token", "t_u", "viterbi_t"], &rows)
        )
    }
}

pub fn inspect_alignment(model: &Model, u: &Utterance, lambda: f64) -> Result<AlignmentInspection> {
    let mut g = Graph::new();
    let mut f = Fwd::eval(&mut g, model.params());
    let lattice = model.forward_lattice(&mut f, &u.features, &u.target_tokens, model.config().chunk_frames)?;
    let frames = lattice.schedule.frames();
    let lp = log_softmax(g.value(lattice.logits));
    let best_path = Lattice::from_log_probs(&lp, &u.target_tokens, model.config().blank())?.best_path();
    Ok(AlignmentInspection {
        id: u.id.clone(),
        frames,
        targets: u.target_tokens.clone(),
        alignment: model.alignment(frames, u.target_tokens.len(), lambda)?,
        best_path,
    })
}
