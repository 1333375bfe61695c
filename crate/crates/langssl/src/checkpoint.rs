//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `LSSLCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` in header order: parameters, Adam first moments, Adam
//! second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use langssl_core::numerics::{ParamStore, Tensor};
use langssl_core::trainer::{AdamState, TrainState};
use langssl_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LSSLCKPT";
pub const VERSION: u32 = 1;

/// Run facts stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub corpus_fingerprint: Option<u64>,
    /// Mean contrastive loss over the last logged steps.
    pub final_contrastive: Option<f64>,
    pub codebook_perplexity: Option<f64>,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    /// False for intermediate checkpoints.
    pub complete: bool,
    pub info: CheckpointInfo,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    step: u64,
    complete: bool,
    adam_step: u64,
    info: CheckpointInfo,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(state: &TrainState, complete: bool, info: &CheckpointInfo) -> Vec<u8> {
    let params = &state.model.params;
    let header = Header {
        model: state.model.config.clone(),
        step: state.step,
        complete,
        adam_step: state.adam.t,
        info: info.clone(),
        tensors: params
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let scalars = params.num_scalars() * 3;
    let mut out = Vec::with_capacity(20 + json.len() + scalars * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let tensors = params
        .iter()
        .map(|(_, _, t)| t)
        .chain(&state.adam.m)
        .chain(&state.adam.v);
    for t in tensors {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Option<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).ok()
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(
        r.take(4)
            .ok_or_else(|| bad("truncated"))?
            .try_into()
            .unwrap(),
    );
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(
        r.take(8)
            .ok_or_else(|| bad("truncated"))?
            .try_into()
            .unwrap(),
    );
    let json = r
        .take(usize::try_from(len).map_err(|_| bad("header too large"))?)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(&format!("bad header: {e}")))?;

    let mut params = ParamStore::new();
    for e in &header.tensors {
        let t = r
            .tensor(&e.shape)
            .ok_or_else(|| bad("truncated tensor data"))?;
        params.insert(&e.name, t)?;
    }
    let mut moments = || {
        header
            .tensors
            .iter()
            .map(|e| {
                r.tensor(&e.shape)
                    .ok_or_else(|| bad("truncated optimizer state"))
            })
            .collect::<Result<Vec<_>>>()
    };
    let m = moments()?;
    let v = moments()?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let model = Model::from_params(header.model, params)?;
    Ok(Checkpoint {
        state: TrainState {
            model,
            adam: AdamState {
                m,
                v,
                t: header.adam_step,
            },
            step: header.step,
        },
        complete: header.complete,
        info: header.info,
    })
}

/// Writes through a temporary file so readers never see a partial file.
pub fn save(path: &Path, state: &TrainState, complete: bool, info: &CheckpointInfo) -> Result<()> {
    let bytes = encode(state, complete, info);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(&bytes).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}
