use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventKind {
    Read,
    Write,
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub token: Option<usize>,
    /// Source milliseconds consumed when the event happened.
    pub ms: f64,
}

/// Ordered READ/WRITE events of one decoding session.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingTrace {
    pub events: Vec<TraceEvent>,
    pub source_total_ms: f64,
}

impl StreamingTrace {
    pub fn new(source_total_ms: f64) -> Self {
        Self {
            events: Vec::new(),
            source_total_ms,
        }
    }

    pub fn read(&mut self, ms: f64) {
        self.events.push(TraceEvent {
            kind: EventKind::Read,
            token: None,
            ms,
        });
    }

    pub fn write(&mut self, token: usize, ms: f64) {
        self.events.push(TraceEvent {
            kind: EventKind::Write,
            token: Some(token),
            ms,
        });
    }

    /// Delay of each emitted token, in emission order.
    pub fn delays(&self) -> Vec<f64> {
        self.events.iter().filter(|e| e.kind == EventKind::Write).map(|e| e.ms).collect()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.events.iter().filter_map(|e| e.token).collect()
    }

    /// Source consumed by the last READ.
    pub fn consumed_ms(&self) -> f64 {
        self.events
            .iter()
            .rev()
            .find(|e| e.kind == EventKind::Read)
            .map_or(0.0, |e| e.ms)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a trace file body. The source length is the last READ.
    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: TraceEvent = serde_json::from_str(line).map_err(|err| Error::Format {
                what: "trace",
                path: path.to_path_buf(),
                detail: format!("line {}: {err}", i + 1),
            })?;
            if (e.kind == EventKind::Write) != e.token.is_some() {
                return Err(Error::Format {
                    what: "trace",
                    path: path.to_path_buf(),
                    detail: format!("line {}: WRITE events carry a token, READ events do not", i + 1),
                });
            }
            events.push(e);
        }
        let mut trace = Self { events, source_total_ms: 0.0 };
        trace.source_total_ms = trace.consumed_ms();
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::model::checkpoint::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?, path)
    }
}
