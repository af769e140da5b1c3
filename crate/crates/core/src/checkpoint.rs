//! Checkpoint container: `b"RNKCKPT1"`, `u64` LE header length, JSON header,
//! then every block's f32 values little-endian in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rankage_autodiff::Tensor;

use crate::encoder::{EncoderConfig, Model, NamedTensors};
use crate::error::{Error, Result};
use crate::util::atomic_write;

const MAGIC: &[u8; 8] = b"RNKCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub label_mean: f64,
    pub label_std: f64,
    pub trained: bool,
    /// Trainer scalars (epoch, stage, learning rate, step counts, history).
    pub state: serde_json::Value,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: NamedTensors,
}

impl Checkpoint {
    pub fn from_model(model: &Model, state: serde_json::Value) -> Self {
        let mut blocks = NamedTensors::default();
        for (n, t) in model.params.iter() {
            blocks.push(format!("param/{n}"), t.clone());
        }
        for (n, t) in model.buffers.iter() {
            blocks.push(format!("buffer/{n}"), t.clone());
        }
        Self {
            header: CheckpointHeader {
                encoder: model.config.clone(),
                label_mean: model.label_mean,
                label_std: model.label_std,
                trained: model.trained,
                state,
                blocks: Vec::new(),
            },
            blocks,
        }
    }

    /// Appends every tensor of `extra` under `prefix/`.
    pub fn add_group(&mut self, prefix: &str, extra: &NamedTensors) {
        for (n, t) in extra.iter() {
            self.blocks.push(format!("{prefix}/{n}"), t.clone());
        }
    }

    /// Tensors stored under `prefix/`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> NamedTensors {
        self.blocks.group_prefix(prefix)
    }

    /// Rebuilds the model, checking every tensor against a fresh initialization.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.header.encoder.clone())?;
        let fill = |target: &mut NamedTensors, source: NamedTensors, what: &str| -> Result<()> {
            if source.names() != target.names() {
                return Err(Error::Checkpoint(format!("{what} names do not match the encoder config")));
            }
            for (dst, src) in target.tensors_mut().iter_mut().zip(source.tensors()) {
                if dst.shape() != src.shape() {
                    return Err(Error::Checkpoint(format!("{what} shape {:?} vs {:?}", src.shape(), dst.shape())));
                }
                *dst = src.clone();
            }
            Ok(())
        };
        fill(&mut model.params, self.group("param"), "parameter")?;
        fill(&mut model.buffers, self.group("buffer"), "buffer")?;
        model.label_mean = self.header.label_mean;
        model.label_std = self.header.label_std;
        model.trained = self.header.trained;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.blocks = self
            .blocks
            .iter()
            .map(|(n, t)| BlockInfo {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.blocks.element_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.blocks.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut at = 16 + len;
        let mut blocks = NamedTensors::default();
        for b in &header.blocks {
            let n: usize = b.shape.iter().product();
            let end = at + 4 * n;
            let raw = bytes
                .get(at..end)
                .ok_or_else(|| Error::Checkpoint(format!("block {} truncated", b.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blocks.push(b.name.clone(), Tensor::new(b.shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))?);
            at = end;
        }
        if at != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - at)));
        }
        Ok(Self { header, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    Checkpoint::from_model(model, serde_json::Value::Null).write(path)
}

pub fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::read(path)?.model()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let mut m = Model::new(EncoderConfig {
            input_dims: [16, 16, 16],
            seed: 4,
            ..EncoderConfig::default()
        })
        .unwrap();
        m.label_mean = 61.123456789;
        m.label_std = 0.1 + 0.2;
        m.trained = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = Model::new(EncoderConfig {
            input_dims: [16, 16, 16],
            ..EncoderConfig::default()
        })
        .unwrap();
        let bytes = Checkpoint::from_model(&m, serde_json::json!({"epoch": 3})).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[1..]).is_err());
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.header.state["epoch"], 3);
    }
}
