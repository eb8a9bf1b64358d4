use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::data::Vocab;
use crate::tensor::{read_u32, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    step: u64,
    params: Vec<ParamEntry>,
}

/// A model with its vocabulary and training step.
///
/// File layout: magic `CMRC`, version and header length as `u32`, the JSON
/// header, then each parameter as a tensor snapshot in declaration order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub step: u64,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            params: self
                .model
                .layout
                .names
                .iter()
                .zip(&self.model.params)
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for t in &self.model.params {
            t.write_snapshot(w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u32(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut params = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let t = Tensor::read_snapshot(r)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!("{}: shape does not match header", entry.name)));
            }
            params.push(t);
        }
        if header.vocab.len() != header.config.vocab_size {
            return Err(ModelError::Checkpoint("vocabulary size does not match config".into()));
        }
        Ok(Checkpoint {
            model: Model::from_parts(header.config, params)?,
            vocab: header.vocab,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
