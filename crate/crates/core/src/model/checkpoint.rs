//! Single-file checkpoints: magic, version, JSON header, then little-endian f64 blobs.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::geo::HashEmbedding;
use crate::modality::Registry;
use crate::sampler::SamplerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GEOLATNT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Optimizer and sampler state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub sampler: SamplerState,
    pub adam_step: u64,
    /// First and second moments per parameter id; frozen parameters hold zeros.
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingHeader {
    step: u64,
    sampler: SamplerState,
    adam_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    registry: Registry,
    seed: u64,
    training: Option<TrainingHeader>,
    blobs: Vec<BlobEntry>,
}

pub fn save(path: &Path, model: &Model, state: Option<&TrainingState>) -> Result<()> {
    let mut blobs: Vec<(String, &[usize], &[f64])> = Vec::new();
    for p in model.params().iter() {
        blobs.push((p.name.clone(), p.tensor.shape(), p.tensor.data()));
    }
    if let Some(s) = state {
        if s.adam_m.len() != model.params().len() || s.adam_v.len() != model.params().len() {
            return Err(Error::Checkpoint("optimizer state does not cover every parameter".into()));
        }
        for (i, p) in model.params().iter().enumerate() {
            if s.adam_m[i].len() != p.tensor.len() || s.adam_v[i].len() != p.tensor.len() {
                return Err(Error::Checkpoint(format!("optimizer moments for {} have the wrong size", p.name)));
            }
            blobs.push((format!("{ADAM_M}{}", p.name), p.tensor.shape(), &s.adam_m[i]));
            blobs.push((format!("{ADAM_V}{}", p.name), p.tensor.shape(), &s.adam_v[i]));
        }
    }
    let mut offset = 0u64;
    let entries = blobs
        .iter()
        .map(|(name, shape, data)| {
            let e = BlobEntry {
                name: name.clone(),
                shape: shape.to_vec(),
                offset,
                len: data.len() as u64,
            };
            offset += 8 * data.len() as u64;
            e
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        registry: model.registry().clone(),
        seed: model.config().seed,
        training: state.map(|s| TrainingHeader {
            step: s.step,
            sampler: s.sampler.clone(),
            adam_step: s.adam_step,
        }),
        blobs: entries,
    };
    let json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    let file = std::fs::File::create(&tmp).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, _, data) in &blobs {
        for v in *data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `expected` is given the stored registry must equal it.
pub fn load(path: &Path, expected: Option<&Registry>) -> Result<(Model, Option<TrainingState>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(format!("header version {}", header.format_version)));
    }
    if let Some(reg) = expected {
        if reg != &header.registry {
            return Err(Error::Schema(format!("{}: modality registry differs from the expected one", path.display())));
        }
    }
    let blob_data = &bytes[body..];
    let mut blobs: HashMap<&str, (&BlobEntry, Vec<f64>)> = HashMap::new();
    for e in &header.blobs {
        let start = e.offset as usize;
        let end = start + 8 * e.len as usize;
        if end > blob_data.len() {
            return Err(bad(format!("blob {} is truncated", e.name)));
        }
        if e.shape.iter().product::<usize>() as u64 != e.len {
            return Err(bad(format!("blob {} shape does not match its length", e.name)));
        }
        let data = blob_data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blobs.insert(e.name.as_str(), (e, data));
    }

    let mut model = Model::new(header.config.clone(), header.registry.clone(), &HashEmbedding)?;
    let n_params = model.params().len();
    for id in 0..n_params {
        let name = model.params().get(id).name.clone();
        let (entry, data) = blobs
            .remove(name.as_str())
            .ok_or_else(|| bad(format!("missing parameter {name}")))?;
        model.params_mut().set(id, Tensor::new(entry.shape.clone(), data)?)?;
    }

    let state = match &header.training {
        None => None,
        Some(t) => {
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for id in 0..n_params {
                let p = model.params().get(id);
                for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                    let key = format!("{prefix}{}", p.name);
                    let (_, data) = blobs.remove(key.as_str()).ok_or_else(|| bad(format!("missing {key}")))?;
                    if data.len() != p.tensor.len() {
                        return Err(bad(format!("{key} has the wrong size")));
                    }
                    out.push(data);
                }
            }
            Some(TrainingState {
                step: t.step,
                sampler: t.sampler.clone(),
                adam_step: t.adam_step,
                adam_m: m,
                adam_v: v,
            })
        }
    };
    if let Some(extra) = blobs.keys().next() {
        return Err(bad(format!("unexpected blob {extra}")));
    }
    Ok((model, state))
}
