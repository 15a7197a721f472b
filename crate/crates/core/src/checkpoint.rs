//! Checkpoint files: a magic line, a one-line JSON header, then the raw
//! little-endian f32 payload of every tensor in header order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{RunConfig, RunConfigError};
use crate::model::{base_layout, lora_layout, AdapterComposition, AdapterFlags, AdapterSet, Model};
use crate::tensor::Tensor;

pub const MAGIC: &str = "GSAFLOW-CKPT v1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint content hash mismatch (header {expected}, payload {actual})")]
    Hash { expected: String, actual: String },
    #[error("checkpoint config: {0}")]
    Config(#[from] RunConfigError),
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct TensorEntry {
    name: String,
    set: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
struct Header {
    format_version: u32,
    config: String,
    sets: Vec<String>,
    active: Vec<String>,
    trainable: Vec<String>,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
    sha256: String,
}

const SETS: [AdapterSet; 3] = [AdapterSet::Base, AdapterSet::Consistency, AdapterSet::Preference];

fn flag_names(f: AdapterFlags) -> Vec<String> {
    SETS[1..].iter().filter(|s| f.get(**s)).map(|s| s.name().to_string()).collect()
}

fn flags_from(names: &[String]) -> Result<AdapterFlags, CheckpointError> {
    let mut f = AdapterFlags::NONE;
    for n in names {
        match AdapterSet::from_name(n) {
            Some(AdapterSet::Consistency) => f.consistency = true,
            Some(AdapterSet::Preference) => f.preference = true,
            _ => return Err(CheckpointError::Format(format!("unknown adapter flag `{n}`"))),
        }
    }
    Ok(f)
}

fn set_bytes(tensors: &[Tensor<f32>]) -> Vec<u8> {
    tensors.iter().flat_map(|t| t.to_le_f32_bytes()).collect()
}

/// SHA-256 of one adapter set's serialized payload.
pub fn set_hash(adapters: &AdapterComposition<f32>, set: AdapterSet) -> String {
    hex::encode(Sha256::digest(set_bytes(adapters.set(set))))
}

/// A run configuration plus the full adapter composition.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub adapters: AdapterComposition<f32>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &Model<f32>) -> Self {
        Checkpoint {
            config: config.clone(),
            adapters: model.adapters.clone(),
        }
    }

    pub fn into_model(self) -> Result<Model<f32>, CheckpointError> {
        Model::from_parts(self.config.model, self.adapters).map_err(|e| CheckpointError::Format(e.to_string()))
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        let cfg = &self.config.model;
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for set in SETS {
            let layout = if set == AdapterSet::Base { base_layout(cfg) } else { lora_layout(cfg) };
            for ((name, _), t) in layout.iter().zip(self.adapters.set(set)) {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    set: set.name().into(),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                    len: t.len(),
                });
                payload.extend(t.to_le_f32_bytes());
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.to_text(),
            sets: SETS.iter().map(|s| s.name().into()).collect(),
            active: flag_names(self.adapters.active),
            trainable: flag_names(self.adapters.trainable),
            tensors,
            payload_bytes: payload.len(),
            sha256: hex::encode(Sha256::digest(&payload)),
        };
        writeln!(w, "{MAGIC}")?;
        let json = serde_json::to_string(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        writeln!(w, "{json}")?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn load(r: &mut impl BufRead) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(CheckpointError::Format(format!("missing `{MAGIC}` header")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {}", header.format_version)));
        }
        let config = RunConfig::parse(&header.config)?;
        let mut payload = vec![0u8; header.payload_bytes];
        r.read_exact(&mut payload)?;
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(CheckpointError::Format("trailing bytes after payload".into()));
        }
        let actual = hex::encode(Sha256::digest(&payload));
        if actual != header.sha256 {
            return Err(CheckpointError::Hash {
                expected: header.sha256,
                actual,
            });
        }
        let mut sets: [Vec<Tensor<f32>>; 3] = Default::default();
        for e in &header.tensors {
            let idx = SETS
                .iter()
                .position(|s| s.name() == e.set)
                .ok_or_else(|| CheckpointError::Format(format!("unknown set `{}`", e.set)))?;
            let end = e.offset + e.len * 4;
            if end > payload.len() {
                return Err(CheckpointError::Format(format!("tensor `{}` exceeds payload", e.name)));
            }
            let t = Tensor::from_le_f32_bytes(e.shape.clone(), &payload[e.offset..end])
                .map_err(|err| CheckpointError::Format(format!("tensor `{}`: {err}", e.name)))?;
            sets[idx].push(t);
        }
        let [base, phi_c, phi_d] = sets;
        let adapters = AdapterComposition {
            base,
            phi_c,
            phi_d,
            active: flags_from(&header.active)?,
            trainable: flags_from(&header.trainable)?,
        };
        // Validates every tensor shape against the configured layout.
        Model::from_parts(config.model.clone(), adapters.clone()).map_err(|e| CheckpointError::Format(e.to_string()))?;
        Ok(Checkpoint { config, adapters })
    }

    pub fn save_path(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_path(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::load(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
