use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Dataset, SynthTaskConfig, Utterance};
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;
use crate::numeric::Tensor;

pub const FORMAT: &str = "taed-synth-dataset";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    config: SynthTaskConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    source_tokens: Vec<usize>,
    target_tokens: Vec<usize>,
    frames: usize,
    /// Base64 of little-endian `f32`, row-major.
    features: String,
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Header line followed by one JSON record per utterance.
pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        count: dataset.utterances.len(),
        config: dataset.config.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for u in &dataset.utterances {
        let bytes: Vec<u8> = u.features.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        let rec = Record {
            id: u.id.clone(),
            source_tokens: u.source_tokens.clone(),
            target_tokens: u.target_tokens.clone(),
            frames: u.features.rows(),
            features: STANDARD.encode(bytes),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().ok_or_else(|| bad(path, "empty file"))?)
        .map_err(|e| bad(path, format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(bad(path, format!("unknown format {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(Error::Version {
            what: "dataset",
            found: header.version,
            expected: VERSION,
        });
    }
    let dim = header.config.feature_dim;
    let mut utterances = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let rec: Record = serde_json::from_str(line).map_err(|e| bad(path, format!("record {}: {e}", i + 1)))?;
        let bytes = STANDARD
            .decode(&rec.features)
            .map_err(|e| bad(path, format!("record {}: {e}", i + 1)))?;
        if bytes.len() != rec.frames * dim * 4 || rec.frames == 0 {
            return Err(bad(path, format!("record {}: feature payload has {} bytes", i + 1, bytes.len())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        utterances.push(Utterance {
            id: rec.id,
            features: Tensor::new(vec![rec.frames, dim], data)?,
            source_tokens: rec.source_tokens,
            target_tokens: rec.target_tokens,
        });
    }
    if utterances.len() != header.count {
        return Err(bad(path, format!("header promises {} records, found {}", header.count, utterances.len())));
    }
    Ok(Dataset {
        config: header.config,
        utterances,
    })
}

/// Symbol names for indices `0..vocab_size`; index 0 is BOS.
pub fn vocab_symbols(vocab_size: usize) -> Vec<String> {
    (0..vocab_size)
        .map(|i| if i == 0 { "<s>".to_string() } else { format!("w{i}") })
        .collect()
}

pub fn save_vocab(symbols: &[String], path: &Path) -> Result<()> {
    let mut text = symbols.join("\n");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}
