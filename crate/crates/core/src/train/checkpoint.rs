//! Versioned binary checkpoints: magic, format version, a JSON header with
//! the graph and run state, little-endian `f32` payload, SHA-256 trailer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model_graph::ModelGraph;
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"TIRDETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: ModelGraph,
    pub store: ParamStore<f32>,
    /// Optimizer momentum, aligned with `store.params`; empty when absent.
    pub momentum: Vec<Vec<f32>>,
    /// Moving-average weights; empty when disabled.
    pub ema: Vec<Vec<f32>>,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: u64,
    pub best_map: f64,
    /// Whether this state produced `best_map`.
    pub is_best: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    graph_hash: String,
    graph: ModelGraph,
    config: TrainConfig,
    class_names: Vec<String>,
    epoch: usize,
    global_step: u64,
    best_map: f64,
    is_best: bool,
    params: Vec<usize>,
    buffers: Vec<usize>,
    momentum: Vec<usize>,
    ema: Vec<usize>,
}

fn push_f32s(out: &mut Vec<u8>, groups: &[Vec<f32>]) {
    for g in groups {
        for v in g {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_f32s(bytes: &[u8], at: &mut usize, lens: &[usize]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(lens.len());
    for &n in lens {
        let end = *at + 4 * n;
        let chunk = bytes.get(*at..end).ok_or_else(|| Error::Load("checkpoint payload is truncated".into()))?;
        out.push(chunk.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
        *at = end;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let lens = |g: &[Vec<f32>]| g.iter().map(Vec::len).collect::<Vec<_>>();
        let header = Header {
            graph_hash: self.graph.config_hash(),
            graph: self.graph.clone(),
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
            best_map: self.best_map,
            is_best: self.is_best,
            params: lens(&self.store.params),
            buffers: lens(&self.store.buffers),
            momentum: lens(&self.momentum),
            ema: lens(&self.ema),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        push_f32s(&mut out, &self.store.params);
        push_f32s(&mut out, &self.store.buffers);
        push_f32s(&mut out, &self.momentum);
        push_f32s(&mut out, &self.ema);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: &str| Error::Load(format!("not a checkpoint: {m}"));
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!("checkpoint format {version} is not supported (expected {CHECKPOINT_VERSION})")));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hjson = body.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let h: Header = serde_json::from_slice(hjson)?;
        if h.graph.config_hash() != h.graph_hash {
            return Err(bad("embedded graph does not match its hash"));
        }
        let mut at = 20 + hlen;
        let params = read_f32s(body, &mut at, &h.params)?;
        let buffers = read_f32s(body, &mut at, &h.buffers)?;
        let momentum = read_f32s(body, &mut at, &h.momentum)?;
        let ema = read_f32s(body, &mut at, &h.ema)?;
        if at != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            graph: h.graph,
            store: ParamStore { params, buffers },
            momentum,
            ema,
            config: h.config,
            class_names: h.class_names,
            epoch: h.epoch,
            global_step: h.global_step,
            best_map: h.best_map,
            is_best: h.is_best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint that must have been produced by `graph`.
    pub fn load_for(path: &Path, graph: &ModelGraph) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        let (want, got) = (graph.config_hash(), ck.graph.config_hash());
        if want != got {
            return Err(Error::GraphMismatch(format!(
                "{} was written for graph {} but the requested graph is {}; use a transfer remap instead",
                path.display(),
                &got[..12],
                &want[..12]
            )));
        }
        Ok(ck)
    }
}
