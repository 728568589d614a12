//! Recognition/translation quality and streaming latency.

mod latency;
mod quality;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::streaming::StreamingTrace;

pub use latency::{
    average_lagging, average_proportion, differentiable_average_lagging, latency, length_adaptive_average_lagging, Latency,
};
pub use quality::{bleu, corpus_wer, edit_distance, token_accuracy, wer};

/// Per-utterance latencies and their corpus means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub per_utterance: Vec<Latency>,
    pub mean: Latency,
}

impl LatencyReport {
    pub fn new(traces: &[StreamingTrace], ref_lens: &[usize]) -> Result<Self> {
        if traces.len() != ref_lens.len() {
            return Err(Error::Input(format!("{} traces for {} references", traces.len(), ref_lens.len())));
        }
        let per_utterance: Vec<Latency> = traces.iter().zip(ref_lens).map(|(t, &r)| latency(t, r)).collect();
        let n = per_utterance.len().max(1) as f64;
        let mean = |f: fn(&Latency) -> f64| per_utterance.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean: Latency {
                al: mean(|l| l.al),
                laal: mean(|l| l.laal),
                ap: mean(|l| l.ap),
                dal: mean(|l| l.dal),
            },
            per_utterance,
        })
    }
}

/// Plain-text table with right-aligned columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        cells
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&mut header.iter().copied());
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(&mut r.iter().map(String::as_str)));
        out.push('\n');
    }
    out
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
