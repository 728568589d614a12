//! Checkpoint file format and averaging.
//!
//! Layout (all integers little-endian):
//!
//! | offset   | size | content                                   |
//! |----------|------|-------------------------------------------|
//! | 0        | 8    | magic `TAEDCKPT`                          |
//! | 8        | 4    | `u32` format version (currently 1)        |
//! | 12       | 8    | `u64` manifest length `M` in bytes        |
//! | 20       | M    | UTF-8 JSON manifest (see [`Manifest`])   |
//! | 20 + M   | 4·N  | `f32` payload, tensors in manifest order |
//!
//! Each manifest tensor entry records its name, shape, element offset into
//! the payload and element count. Values are stored row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::Model;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TAEDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: Option<usize>,
    pub validation_loss: Option<f64>,
    /// Number of checkpoints averaged into this one (1 for a plain save).
    pub averaged_from: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_config: ModelConfig,
    pub blank_index: usize,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named `f32` tensors plus the configuration needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            config: model.config().clone(),
            meta: CheckpointMeta {
                averaged_from: 1,
                ..Default::default()
            },
            tensors,
        }
    }

    /// Rebuilds the model and loads the stored values.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone())?;
        model.params_mut().load_values(
            self.tensors
                .iter()
                .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.iter().map(|&v| v as f64).collect())),
        )?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    offset,
                    count: t.data.len(),
                };
                offset += t.data.len();
                e
            })
            .collect();
        let manifest = Manifest {
            model_config: self.config.clone(),
            blank_index: self.config.blank(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err(path, "missing checkpoint header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(len))
            .ok_or_else(|| format_err(path, "truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| format_err(path, format!("manifest: {e}")))?;
        let payload = &bytes[20 + len..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.shape.iter().product::<usize>() != e.count {
                return Err(format_err(path, format!("{}: shape/count disagree", e.name)));
            }
            let start = e.offset * 4;
            let raw = payload
                .get(start..start + e.count * 4)
                .ok_or_else(|| format_err(path, format!("{}: truncated payload", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        let expected: usize = manifest.tensors.iter().map(|e| e.count * 4).sum();
        if payload.len() != expected {
            return Err(format_err(path, format!("payload is {} bytes, expected {expected}", payload.len())));
        }
        if manifest.blank_index != manifest.model_config.blank() {
            return Err(format_err(path, "blank index disagrees with the model configuration"));
        }
        Ok(Self {
            config: manifest.model_config,
            meta: manifest.meta,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Element-wise arithmetic mean (accumulated in `f64`) of checkpoints
    /// with identical tensor names and shapes.
    pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
        let first = checkpoints
            .first()
            .ok_or_else(|| Error::Input("nothing to average".into()))?;
        let k = checkpoints.len() as f64;
        let mut tensors = Vec::with_capacity(first.tensors.len());
        for (i, t) in first.tensors.iter().enumerate() {
            let mut acc = vec![0.0f64; t.data.len()];
            for ck in checkpoints {
                let other = ck
                    .tensors
                    .get(i)
                    .filter(|o| o.name == t.name && o.shape == t.shape)
                    .ok_or_else(|| Error::shape("average_checkpoints", format!("tensor {} differs", t.name)))?;
                for (a, &v) in acc.iter_mut().zip(&other.data) {
                    *a += v as f64;
                }
            }
            tensors.push(NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: acc.iter().map(|&a| (a / k) as f32).collect(),
            });
        }
        if checkpoints.iter().any(|c| c.tensors.len() != first.tensors.len()) {
            return Err(Error::shape("average_checkpoints", "tensor counts differ"));
        }
        Ok(Checkpoint {
            config: first.config.clone(),
            meta: CheckpointMeta {
                step: checkpoints.iter().filter_map(|c| c.meta.step).max(),
                validation_loss: None,
                averaged_from: checkpoints.len(),
            },
            tensors,
        })
    }

    pub fn average_files(paths: &[impl AsRef<Path>]) -> Result<Checkpoint> {
        let cks = paths
            .iter()
            .map(|p| Checkpoint::load(p.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Checkpoint::average(&cks)
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f32) -> Checkpoint {
        let mut out = self.clone();
        for t in &mut out.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
        out
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};

    fn small() -> Model {
        Model::new(ModelConfig {
            kind: ModelKind::Transducer,
            feature_dim: 2,
            d_model: 4,
            n_heads: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 4,
            vocab_size: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::from_model(&small()).to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"TAEDCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn truncation_and_version_errors() {
        let path = Path::new("mem");
        let bytes = Checkpoint::from_model(&small()).to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bumped, path), Err(Error::Version { found: 9, .. })));
        assert!(Checkpoint::from_bytes(b"nope", path).is_err());
    }

    #[test]
    fn average_of_one_is_identity() {
        let ck = Checkpoint::from_model(&small());
        let avg = Checkpoint::average(std::slice::from_ref(&ck)).unwrap();
        assert_eq!(avg.tensors, ck.tensors);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = Checkpoint::from_model(&small());
        let mut b = a.clone();
        b.tensors[0].shape = vec![1, b.tensors[0].data.len()];
        assert!(Checkpoint::average(&[a, b]).is_err());
    }
}
