//! `dcseg_ckpt_v1` files.
//!
//! Layout: the magic line `dcseg_ckpt_v1\n`, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order. Model parameters come first, in construction order, followed by
//! any extra tensors.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::{DcSegModel, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8] = b"dcseg_ckpt_v1\n";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    log_t: f32,
    tensors: Vec<TensorEntry>,
    state: Option<serde_json::Value>,
}

/// A restored model plus whatever a training run stored alongside it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: DcSegModel,
    pub extras: Vec<(String, Tensor)>,
    pub state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// First top-level field on which two configs differ, with both values
/// rendered as JSON.
pub fn config_difference<T: Serialize>(a: &T, b: &T) -> Option<(String, String, String)> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (ma, mb) = (va.as_object()?, vb.as_object()?);
    ma.iter().find_map(|(k, x)| {
        let y = mb.get(k)?;
        (x != y).then(|| (k.clone(), x.to_string(), y.to_string()))
    })
}

/// Fails with [`Error::ConfigMismatch`] naming the first differing field.
pub fn ensure_same_config<T: Serialize>(checkpoint: &T, requested: &T) -> Result<()> {
    match config_difference(checkpoint, requested) {
        None => Ok(()),
        Some((field, checkpoint, requested)) => Err(Error::ConfigMismatch {
            field,
            checkpoint,
            requested,
        }),
    }
}

/// Writes `model` and `extras` to `path`, replacing it atomically.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &DcSegModel,
    extras: &[(String, &Tensor)],
    state: Option<serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let params = model.params();
    let tensors: Vec<(&str, &Tensor)> = params
        .iter()
        .map(|(_, n, t)| (n, t))
        .chain(extras.iter().map(|(n, t)| (n.as_str(), *t)))
        .collect();
    let header = Header {
        model_config: model.config().clone(),
        log_t: params.get(model.temperature_id())[[0]],
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        state,
    };
    let header = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(path, e);
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for (_, t) in &tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let io = |e| Error::io(path, e);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    if r.read_exact(&mut magic).is_err() || magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 32 {
        return Err(Error::Checkpoint("header length out of range".into()));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    serde_json::from_slice(&header).map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))
}

/// Reads only the model configuration of a checkpoint.
pub fn read_checkpoint_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    Ok(read_header(&mut r, path)?.model_config)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(&mut r, path)?;
    let mut model = DcSegModel::new(header.model_config, 0)?;
    let n_params = model.params().len();
    if header.tensors.len() < n_params {
        return Err(Error::Checkpoint("fewer tensors than model parameters".into()));
    }

    let mut store = ParamStore::new();
    let mut extras = Vec::new();
    let mut buf = Vec::new();
    for (i, entry) in header.tensors.into_iter().enumerate() {
        let len: usize = entry.shape.iter().product();
        buf.resize(len * 4, 0);
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated payload at {}", entry.name)))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&entry.shape), data).expect("length matches shape");
        if i < n_params {
            store.add(entry.name, t);
        } else {
            extras.push((entry.name, t));
        }
    }
    if r.read(&mut [0u8; 1]).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    model.load_params(store)?;
    if model.params().get(model.temperature_id())[[0]].to_bits() != header.log_t.to_bits() {
        return Err(Error::Checkpoint("log_t header disagrees with its tensor".into()));
    }
    Ok(Checkpoint {
        model,
        extras,
        state: header.state,
    })
}
