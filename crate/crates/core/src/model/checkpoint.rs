//! Checkpoint archive: parameter arrays (plus optional optimizer state) with
//! a sidecar JSON manifest carrying the config, its hash, iteration count,
//! and seed. Round-trips are bit-exact.

use super::{FlowNet, ModelConfig};
use crate::error::{Error, Result};
use ndarray::ArrayD;
use semarflow_autograd::{read_archive, write_archive, Element};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub iteration: u64,
    pub seed: u64,
}

pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Write parameters plus `extra` arrays (optimizer state etc.) and the
/// manifest sidecar.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    net: &FlowNet<T>,
    iteration: u64,
    train_seed: u64,
    extra: &[(String, ArrayD<T>)],
) -> Result<()> {
    let mut entries: Vec<(&str, &ArrayD<T>)> = net.store().iter().collect();
    for (name, arr) in extra {
        entries.push((name.as_str(), arr));
    }
    write_archive(path, &entries)
        .map_err(|e| Error::Compat(format!("cannot write checkpoint: {e}")))?;
    let manifest = CheckpointManifest {
        version: 1,
        config: net.config().clone(),
        config_hash: config_hash(net.config()),
        iteration,
        seed: train_seed,
    };
    let mp = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mp, json).map_err(|e| Error::io(mp, e))
}

/// Rebuild a network from a checkpoint. Verifies the manifest hash against
/// the embedded config and that every expected parameter is present with the
/// right shape. Non-parameter arrays come back in the extras list.
pub fn load_checkpoint<T: Element>(
    path: &Path,
) -> Result<(FlowNet<T>, CheckpointManifest, Vec<(String, ArrayD<T>)>)> {
    let mp = manifest_path(path);
    let json = std::fs::read_to_string(&mp).map_err(|e| Error::io(mp.clone(), e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&json).map_err(|e| Error::Compat(format!("bad manifest: {e}")))?;
    let expected = config_hash(&manifest.config);
    if expected != manifest.config_hash {
        return Err(Error::Compat(format!(
            "config hash mismatch: manifest says {}, config hashes to {expected}",
            manifest.config_hash
        )));
    }
    let mut net = FlowNet::<T>::new(manifest.config.clone())?;
    let arrays = read_archive::<T>(path)
        .map_err(|e| Error::Compat(format!("cannot read checkpoint: {e}")))?;
    let mut extra = Vec::new();
    let mut by_name: std::collections::HashMap<String, ArrayD<T>> = std::collections::HashMap::new();
    for (name, arr) in arrays {
        by_name.insert(name, arr);
    }
    for i in 0..net.store().len() {
        let name = net.store().name(semarflow_autograd::ParamId(i)).to_string();
        let arr = by_name.remove(&name).ok_or_else(|| {
            Error::Compat(format!("checkpoint is missing parameter {name}"))
        })?;
        if arr.shape() != net.store().get(semarflow_autograd::ParamId(i)).shape() {
            return Err(Error::Compat(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                arr.shape(),
                net.store().get(semarflow_autograd::ParamId(i)).shape()
            )));
        }
        *net.store_mut().get_mut(semarflow_autograd::ParamId(i)) = arr;
    }
    for (name, arr) in by_name {
        extra.push((name, arr));
    }
    extra.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((net, manifest, extra))
}
