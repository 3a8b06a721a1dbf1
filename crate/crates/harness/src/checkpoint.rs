//! PINN checkpoint files.
//!
//! Layout: the magic line `MBCE-CKPT-1\n`, a little-endian `u64` header
//! length, a JSON [`CheckpointHeader`], then every parameter tensor as
//! little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mbce_core::autodiff::{ParamStore, Tensor};
use mbce_core::estimators::Estimator;
use mbce_core::pinn::{ModelParams, PinnConfig};

use crate::bundle::hash_hex;
use crate::{HarnessError, Result};

const MAGIC: &[u8] = b"MBCE-CKPT-1\n";

/// How the network's input estimate was produced during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub init_method: Estimator,
    /// Pilot counts mixed into the training set.
    pub pilots: Vec<usize>,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: PinnConfig,
    pub kappa: f64,
    pub power_norm: f64,
    pub params: Vec<ParamEntry>,
    pub value_count: u64,
    pub checksum: String,
    pub meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: TrainMeta,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let store = &ckpt.params.store;
    let mut body = Vec::with_capacity(store.numel() * 8);
    for t in &store.tensors {
        for v in &t.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        config: ckpt.params.config.clone(),
        kappa: ckpt.params.kappa,
        power_norm: ckpt.params.power_norm,
        params: store
            .names
            .iter()
            .zip(&store.tensors)
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        value_count: store.numel() as u64,
        checksum: hash_hex(&body),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

fn bad(msg: &str) -> HarnessError {
    HarnessError::BadCheckpoint(msg.to_string())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let rest = raw.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic line"))?;
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let (json, body) = rest.split_at(len);
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if hash_hex(body) != header.checksum {
        return Err(HarnessError::ChecksumMismatch("checkpoint parameters".into()));
    }
    let declared: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if declared as u64 != header.value_count || body.len() != declared * 8 {
        return Err(bad("parameter count disagrees with header"));
    }
    header.config.validate()?;
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut store = ParamStore::new();
    for p in &header.params {
        let n = p.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        store
            .add(&p.name, Tensor::new(&p.shape, data))
            .map_err(|e| HarnessError::BadCheckpoint(e.to_string()))?;
    }
    // The stored topology must match what the configuration would build.
    let fresh = mbce_core::pinn::init_params(&header.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let layout = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
        s.names
            .iter()
            .cloned()
            .zip(s.tensors.iter().map(|t| t.shape.clone()))
            .collect()
    };
    if layout(&fresh.store) != layout(&store) {
        return Err(bad("parameter layout does not match the stored configuration"));
    }
    Ok(Checkpoint {
        params: ModelParams {
            config: header.config,
            store,
            kappa: header.kappa,
            power_norm: header.power_norm,
        },
        meta: header.meta,
    })
}
