//! `CSTCKPT1` checkpoint files: magic line, one JSON header line, then the
//! tensors in header order as little-endian f32.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CstConfig, CstModel};
use crate::error::{CstError, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "CSTCKPT1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: CstConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: CstConfig,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(config: &CstConfig, seed: u64, store: &ParamStore) -> Result<Vec<u8>> {
        let header = Header {
            version: VERSION,
            config: config.clone(),
            seed,
            tensors: store
                .entries()
                .iter()
                .map(|e| TensorEntry {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}")?;
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for e in store.entries() {
            for &v in e.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(CstError::Data(format!("not a checkpoint: expected {MAGIC} magic")));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header =
            serde_json::from_str(&line).map_err(|e| CstError::Data(format!("bad checkpoint header: {e}")))?;
        if header.version != VERSION {
            return Err(CstError::Data(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(CstError::Data(format!(
                "checkpoint payload has {} bytes, header implies {}",
                payload.len(),
                total * 4
            )));
        }
        let mut vals = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        let tensors = header
            .tensors
            .into_iter()
            .map(|t| {
                let n = t.shape.iter().product();
                let data: Vec<f64> = vals.by_ref().take(n).collect();
                Ok((t.name, Tensor::new(&t.shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            tensors,
        })
    }

    /// Rebuilds the model topology from the stored config and loads the values.
    pub fn into_model(self) -> Result<(CstModel, ParamStore)> {
        let (model, mut store) = CstModel::new(self.config, self.seed)?;
        store.load(self.tensors)?;
        Ok((model, store))
    }
}

pub fn save_checkpoint(path: &Path, config: &CstConfig, seed: u64, store: &ParamStore) -> Result<()> {
    std::fs::write(path, Checkpoint::to_bytes(config, seed, store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_reader(std::fs::File::open(path)?)
}
