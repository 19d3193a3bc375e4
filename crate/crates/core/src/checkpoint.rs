//! Binary checkpoints: a magic line, a length-prefixed JSON header describing
//! the configuration and tensor layout, then little-endian `f64` data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::LatentVg;
use crate::tensor::Matrix;

const MAGIC: &[u8] = b"LATENTVG-CHECKPOINT 1\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &LatentVg, step: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = Header {
        config: model.config.clone(),
        step,
        tensors: model
            .store
            .iter()
            .map(|(_, name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for (_, _, m) in model.store.iter() {
        for v in m.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Loads a checkpoint; returns the model and the step it was written at.
pub fn load(path: &Path) -> Result<(LatentVg, usize)> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |detail: &str| Error::format("checkpoint", detail.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic line"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let (json, mut data) = rest.split_at(len);
    let header: Header = serde_json::from_slice(json)?;
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let n = t.rows * t.cols;
        if data.len() < n * 8 {
            return Err(bad("truncated tensor data"));
        }
        let (chunk, tail) = data.split_at(n * 8);
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.add(t.name.clone(), Matrix::from_vec(t.rows, t.cols, values)?);
        data = tail;
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((LatentVg::from_parts(header.config, &store)?, header.step))
}
