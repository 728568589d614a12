use serde::Serialize;

use crate::streaming::StreamingTrace;

/// Per-utterance latency, delays in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Latency {
    pub al: f64,
    pub laal: f64,
    pub ap: f64,
    pub dal: f64,
}

fn lagging(delays: &[f64], source_ms: f64, len: usize) -> f64 {
    if delays.is_empty() || len == 0 {
        return 0.0;
    }
    let step = source_ms / len as f64;
    let cut = delays
        .iter()
        .position(|&d| d >= source_ms)
        .map_or(delays.len(), |i| i + 1);
    let sum: f64 = delays[..cut].iter().enumerate().map(|(i, &d)| d - i as f64 * step).sum();
    sum / cut as f64
}

/// Average lagging against the ideal policy that emits a token every
/// `source_ms / ref_len` milliseconds, up to the first token emitted with
/// the whole source read.
pub fn average_lagging(delays: &[f64], source_ms: f64, ref_len: usize) -> f64 {
    lagging(delays, source_ms, ref_len)
}

/// Average lagging with the ideal rate taken from the longer of reference
/// and hypothesis.
pub fn length_adaptive_average_lagging(delays: &[f64], source_ms: f64, ref_len: usize) -> f64 {
    lagging(delays, source_ms, ref_len.max(delays.len()))
}

/// Mean delay as a fraction of the source length.
pub fn average_proportion(delays: &[f64], source_ms: f64) -> f64 {
    if delays.is_empty() {
        return 0.0;
    }
    delays.iter().sum::<f64>() / (delays.len() as f64 * source_ms)
}

/// Lagging over delays forced to grow by at least `source_ms / ref_len`
/// per token, averaged over every token.
pub fn differentiable_average_lagging(delays: &[f64], source_ms: f64, ref_len: usize) -> f64 {
    if delays.is_empty() || ref_len == 0 {
        return 0.0;
    }
    let step = source_ms / ref_len as f64;
    let mut prev = f64::NEG_INFINITY;
    let mut sum = 0.0;
    for (i, &d) in delays.iter().enumerate() {
        let dd = if i == 0 { d } else { d.max(prev + step) };
        sum += dd - i as f64 * step;
        prev = dd;
    }
    sum / delays.len() as f64
}

pub fn latency(trace: &StreamingTrace, ref_len: usize) -> Latency {
    let d = trace.delays();
    let s = trace.source_total_ms;
    Latency {
        al: average_lagging(&d, s, ref_len),
        laal: length_adaptive_average_lagging(&d, s, ref_len),
        ap: average_proportion(&d, s),
        dal: differentiable_average_lagging(&d, s, ref_len),
    }
}
