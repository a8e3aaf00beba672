//! Content-addressed checkpoint files.
//!
//! On disk a checkpoint is one line of JSON (the header), a `\n`, then the
//! parameters as little-endian `f32` in [`ParamLayout`] order. The id is the
//! SHA-256 of the same bytes with `checkpoint_id` left out of the header, so
//! equal parameters and metadata always produce equal ids.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::ExpertConfig;
use super::params::{ModelParams, ParamLayout, TensorSpec};

pub const CHECKPOINT_FORMAT: &str = "elmforest-checkpoint-v1";
pub const CHECKPOINT_EXTENSION: &str = "ckpt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint hash mismatch: header says {expected}, content hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
}

/// One domain-training run in an expert's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    /// 1-based BTM iteration.
    pub iteration: usize,
    pub domain: String,
    /// Id of the checkpoint training started from.
    pub parent: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCheckpoint {
    config: ExpertConfig,
    params: ModelParams<f32>,
    step: usize,
    lineage: Vec<LineageEntry>,
    checkpoint_id: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ExpertConfig,
    step: usize,
    lineage: Vec<LineageEntry>,
    dtype: String,
    tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    checkpoint_id: Option<String>,
}

impl ExpertCheckpoint {
    pub fn new(
        config: ExpertConfig,
        params: ModelParams<f32>,
        step: usize,
        lineage: Vec<LineageEntry>,
    ) -> Self {
        assert_eq!(params.len(), config.param_count(), "parameter count does not match config");
        let mut ckpt = Self {
            config,
            params,
            step,
            lineage,
            checkpoint_id: String::new(),
        };
        ckpt.checkpoint_id = ckpt.content_hash();
        ckpt
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    /// Optimizer steps of the run that produced this checkpoint.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn lineage(&self) -> &[LineageEntry] {
        &self.lineage
    }

    pub fn id(&self) -> &str {
        &self.checkpoint_id
    }

    /// Same parameters under a different tier label (and therefore a new id).
    pub fn relabel(&self, tier: Option<crate::corpus::DifficultyTier>) -> Self {
        Self::new(
            self.config.clone().with_tier(tier),
            self.params.clone(),
            self.step,
            self.lineage.clone(),
        )
    }

    fn header(&self, with_id: bool) -> Header {
        Header {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            step: self.step,
            lineage: self.lineage.clone(),
            dtype: "f32-le".into(),
            tensors: ParamLayout::new(&self.config).tensors,
            checkpoint_id: with_id.then(|| self.checkpoint_id.clone()),
        }
    }

    fn blob(&self) -> Vec<u8> {
        self.params.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.header(false)).expect("header serializes"));
        hasher.update(b"\n");
        hasher.update(self.blob());
        hex::encode(hasher.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header(true)).expect("header serializes");
        out.push(b'\n');
        out.extend(self.blob());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Format("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unknown format `{}`", header.format)));
        }
        let blob = &bytes[split + 1..];
        let expected = header.config.param_count() * 4;
        if blob.len() != expected {
            return Err(CheckpointError::Format(format!(
                "tensor blob has {} bytes, config needs {expected}",
                blob.len()
            )));
        }
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let ckpt = Self::new(header.config, ModelParams { data }, header.step, header.lineage);
        if let Some(claimed) = header.checkpoint_id {
            if claimed != ckpt.checkpoint_id {
                return Err(CheckpointError::HashMismatch {
                    expected: claimed,
                    actual: ckpt.checkpoint_id,
                });
            }
        }
        Ok(ckpt)
    }

    /// Writes `<dir>/<id>.ckpt`; an existing file with that name already holds
    /// identical content and is left alone.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, CheckpointError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CheckpointError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let path = dir.join(format!("{}.{CHECKPOINT_EXTENSION}", self.checkpoint_id));
        if !path.exists() {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, self.to_bytes()).map_err(io(&tmp))?;
            fs::rename(&tmp, &path).map_err(io(&path))?;
        }
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::params::init_model;

    fn sample() -> ExpertCheckpoint {
        let c = ExpertConfig::new(8, 16, 2, 1).with_vocab(12).with_seq_len(8);
        let lineage = vec![LineageEntry {
            iteration: 1,
            domain: "math".into(),
            parent: "abc".into(),
        }];
        ExpertCheckpoint::new(c.clone(), init_model(&c, 1), 40, lineage)
    }

    #[test]
    fn bytes_round_trip_and_id_is_stable() {
        let a = sample();
        let b = ExpertCheckpoint::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), sample().id());
        assert_eq!(a.id().len(), 64);
    }

    #[test]
    fn id_depends_on_content() {
        let a = sample();
        let c = a.config().clone();
        let mut p = a.params().clone();
        p.data[0] += 1.0;
        let b = ExpertCheckpoint::new(c, p, a.step(), a.lineage().to_vec());
        assert_ne!(a.id(), b.id());
        assert_ne!(a.id(), a.relabel(Some(crate::corpus::DifficultyTier::Easy)).id());
    }

    #[test]
    fn tampering_is_detected() {
        let a = sample();
        let mut bytes = a.to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(
            ExpertCheckpoint::from_bytes(&bytes),
            Err(CheckpointError::HashMismatch { .. })
        ));
        assert!(matches!(
            ExpertCheckpoint::from_bytes(&bytes[..last]),
            Err(CheckpointError::Format(_))
        ));
    }

    #[test]
    fn save_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample();
        let path = a.save(dir.path()).unwrap();
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), a.id());
        assert_eq!(a.save(dir.path()).unwrap(), path);
        assert_eq!(ExpertCheckpoint::load(&path).unwrap(), a);
    }
}
