//! On-disk checkpoints: a little-endian `f64` blob of every parameter in
//! registration order plus a JSON manifest describing layout and hashes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, Params};
use crate::error::{CalmError, Result};
use crate::eval::EvalOptions;
use crate::model::{CalmModel, ModelConfig};
use crate::train::TrainConfig;

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub config_hash: String,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalOptions>,
    pub numel: usize,
    pub params_sha256: String,
    pub params: Vec<ParamEntry>,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: CalmModel,
    pub params: Params,
}

pub fn params_to_bytes(params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.numel() * 8);
    for (_, _, m) in params.iter() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes `dir/params.bin` and `dir/manifest.json`.
pub fn save(
    dir: &Path,
    model: &ModelConfig,
    params: &Params,
    seed: u64,
    train: Option<&TrainConfig>,
    eval: Option<&EvalOptions>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let blob = params_to_bytes(params);
    let mut offset = 0;
    let entries = params
        .iter()
        .map(|(_, name, m)| {
            let e = ParamEntry {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
                offset,
            };
            offset += m.len();
            e
        })
        .collect();
    let manifest = CheckpointManifest {
        version: version(),
        seed,
        model: model.clone(),
        config_hash: config_hash(model)?,
        train: train.cloned(),
        eval: eval.cloned(),
        numel: params.numel(),
        params_sha256: sha256_hex(&blob),
        params: entries,
    };
    fs::write(dir.join(PARAMS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(CalmError::Checkpoint(format!("{} not found", manifest_path.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    if sha256_hex(&blob) != manifest.params_sha256 {
        return Err(CalmError::Checkpoint("parameter blob hash mismatch".into()));
    }
    if blob.len() != manifest.numel * 8 {
        return Err(CalmError::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {} values",
            blob.len(),
            manifest.numel
        )));
    }
    if config_hash(&manifest.model)? != manifest.config_hash {
        return Err(CalmError::Checkpoint("model config hash mismatch".into()));
    }
    let (model, mut params) = CalmModel::build(&manifest.model, manifest.seed)?;
    if params.len() != manifest.params.len() {
        return Err(CalmError::Checkpoint(format!(
            "model has {} parameters, checkpoint {}",
            params.len(),
            manifest.params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for (id, e) in ids.into_iter().zip(&manifest.params) {
        let (name, shape) = (params.name(id).to_string(), params.get(id).dim());
        if name != e.name || shape != (e.rows, e.cols) {
            return Err(CalmError::Checkpoint(format!(
                "layout mismatch at {}: expected {name} {shape:?}",
                e.name
            )));
        }
        let n = e.rows * e.cols;
        let values: Vec<f64> = blob[e.offset * 8..(e.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *params.get_mut(id) = Mat::from_shape_vec((e.rows, e.cols), values).expect("shape checked");
    }
    Ok(Checkpoint {
        manifest,
        model,
        params,
    })
}
