//! Binary per-task snapshots of client state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic            8 bytes  "FEDCLCKP"
//! version          u32      CHECKPOINT_VERSION
//! config_len       u64      followed by the run's config as UTF-8 TOML
//! completed_tasks  u64
//! num_clients      u64
//! per client:
//!   client_id u64, seed u64, activation u8 (0 relu, 1 tanh),
//!   num_sizes u64, sizes u64 * num_sizes,
//!   rho f64, k u64, task_cursor u64,
//!   num_params u64, params f64 * num_params,
//!   num_global u64, global indices u64 * num_global,
//!   num_tasks u64, per task:
//!     task_id u64, rho f64, param_count u64,
//!     has_background u8, [background f64 * param_count],
//!     num_entries u64, (index u64, value f64) * num_entries
//! progress_len     u64      followed by run progress as UTF-8 JSON
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ClientState, PartitionMask};
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::IntegrationSummary;
use crate::harness::metrics::CommLedger;
use crate::knowledge::{KnowledgeStore, TaskKnowledge};
use crate::nn::{Activation, MlpShape, ParamVector};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FEDCLCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metrics accumulated up to the checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub client_accuracy: Vec<Vec<Vec<f64>>>,
    pub ledger: CommLedger,
    pub integration: IntegrationSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// The run's config with output settings cleared.
    pub config_toml: String,
    pub completed_tasks: usize,
    pub clients: Vec<ClientState>,
    pub progress: Progress,
}

fn fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output = Default::default();
    c.to_toml()
}

impl Checkpoint {
    pub fn new(
        cfg: &ExperimentConfig,
        completed_tasks: usize,
        clients: Vec<ClientState>,
        progress: Progress,
    ) -> Result<Self> {
        Ok(Checkpoint { config_toml: fingerprint(cfg)?, completed_tasks, clients, progress })
    }

    /// Errors unless the checkpoint was produced by an equivalent config.
    pub fn check_matches(&self, cfg: &ExperimentConfig) -> Result<()> {
        if fingerprint(cfg)? != self.config_toml {
            return Err(Error::Checkpoint("checkpoint was written by a different configuration".into()));
        }
        if self.completed_tasks > cfg.stream.num_tasks || self.clients.len() != cfg.num_clients {
            return Err(Error::Checkpoint("checkpoint does not fit the configured run".into()));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        write_blob(&mut w, self.config_toml.as_bytes())?;
        w.write_u64::<LittleEndian>(self.completed_tasks as u64)?;
        w.write_u64::<LittleEndian>(self.clients.len() as u64)?;
        for c in &self.clients {
            write_client(&mut w, c)?;
        }
        write_blob(&mut w, serde_json::to_string(&self.progress)?.as_bytes())?;
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_toml = read_string(&mut r)?;
        let completed_tasks = read_len(&mut r)?;
        let n = read_len(&mut r)?;
        let clients = (0..n).map(|_| read_client(&mut r)).collect::<Result<Vec<_>>>()?;
        let progress = serde_json::from_str(&read_string(&mut r)?)?;
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { config_toml, completed_tasks, clients, progress })
    }
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated checkpoint: {e}"))
}

fn write_blob(w: &mut Vec<u8>, data: &[u8]) -> Result<()> {
    w.write_u64::<LittleEndian>(data.len() as u64)?;
    w.write_all(data)?;
    Ok(())
}

fn write_f64s(w: &mut Vec<u8>, v: &[f64]) -> Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn write_client(w: &mut Vec<u8>, c: &ClientState) -> Result<()> {
    w.write_u64::<LittleEndian>(c.client_id as u64)?;
    w.write_u64::<LittleEndian>(c.seed)?;
    w.write_u8(match c.shape.activation() {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    })?;
    w.write_u64::<LittleEndian>(c.shape.layer_sizes().len() as u64)?;
    for &s in c.shape.layer_sizes() {
        w.write_u64::<LittleEndian>(s as u64)?;
    }
    w.write_f64::<LittleEndian>(c.rho)?;
    w.write_u64::<LittleEndian>(c.k as u64)?;
    w.write_u64::<LittleEndian>(c.task_cursor as u64)?;
    write_f64s(w, &c.params)?;
    w.write_u64::<LittleEndian>(c.mask.global_indices().len() as u64)?;
    for &i in c.mask.global_indices() {
        w.write_u64::<LittleEndian>(i as u64)?;
    }
    w.write_u64::<LittleEndian>(c.store.len() as u64)?;
    for k in c.store.iter() {
        w.write_u64::<LittleEndian>(k.task_id as u64)?;
        w.write_f64::<LittleEndian>(k.rho)?;
        w.write_u64::<LittleEndian>(k.param_count as u64)?;
        match &k.background {
            Some(bg) => {
                w.write_u8(1)?;
                for &x in bg {
                    w.write_f64::<LittleEndian>(x)?;
                }
            }
            None => w.write_u8(0)?,
        }
        w.write_u64::<LittleEndian>(k.entries.len() as u64)?;
        for &(i, v) in &k.entries {
            w.write_u64::<LittleEndian>(i as u64)?;
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

/// Reads a length and rejects values larger than the remaining input.
fn read_len(r: &mut Cursor<&[u8]>) -> Result<usize> {
    let n = r.read_u64::<LittleEndian>().map_err(truncated)?;
    let remaining = r.get_ref().len() as u64 - r.position();
    if n > remaining.max(1) * 8 {
        return Err(Error::Checkpoint(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_string(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = read_len(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

fn read_f64s(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(truncated)).collect()
}

fn read_client(r: &mut Cursor<&[u8]>) -> Result<ClientState> {
    let client_id = read_len(r)?;
    let seed = r.read_u64::<LittleEndian>().map_err(truncated)?;
    let activation = match r.read_u8().map_err(truncated)? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        other => return Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
    };
    let num_sizes = read_len(r)?;
    let sizes = (0..num_sizes).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
    let shape = MlpShape::new(sizes, activation).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let rho = r.read_f64::<LittleEndian>().map_err(truncated)?;
    let k = read_len(r)?;
    let task_cursor = read_len(r)?;
    let num_params = read_len(r)?;
    let params = ParamVector(read_f64s(r, num_params)?);
    let num_global = read_len(r)?;
    let global = (0..num_global).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
    let mask = PartitionMask::from_global(global, shape.param_count()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let num_tasks = read_len(r)?;
    let mut store = KnowledgeStore::new();
    for _ in 0..num_tasks {
        let task_id = read_len(r)?;
        let k_rho = r.read_f64::<LittleEndian>().map_err(truncated)?;
        let param_count = read_len(r)?;
        let background = match r.read_u8().map_err(truncated)? {
            0 => None,
            1 => Some(read_f64s(r, param_count)?),
            other => return Err(Error::Checkpoint(format!("bad background flag {other}"))),
        };
        let num_entries = read_len(r)?;
        let entries = (0..num_entries)
            .map(|_| Ok((read_len(r)?, r.read_f64::<LittleEndian>().map_err(truncated)?)))
            .collect::<Result<Vec<_>>>()?;
        store
            .insert(TaskKnowledge { task_id, rho: k_rho, param_count, entries, background })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    if params.len() != shape.param_count() || store.len() != task_cursor {
        return Err(Error::Checkpoint(format!("client {client_id} state is inconsistent")));
    }
    Ok(ClientState { client_id, seed, shape, params, mask, store, task_cursor, rho, k })
}
