use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{Conformer, ModelDims};
use crate::dataio::StandardizeStats;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// A trained model with the data conventions it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Conformer,
    pub stats: StandardizeStats,
    pub variable_names: Vec<String>,
    pub target_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f64 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    dims: ModelDims,
    variable_names: Vec<String>,
    target_index: usize,
    stats: StatsEntry,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsEntry {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Checkpoint {
    /// Writes `manifest.json` and a little-endian f64 `params.bin` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let store = self.model.store();
        let mut blob = Vec::with_capacity(store.num_scalars() * 8);
        let mut params = Vec::with_capacity(store.len());
        let mut offset = 0;
        for (_, name, value) in store.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                offset,
            });
            for v in value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += value.numel();
        }
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            dims: self.model.dims().clone(),
            variable_names: self.variable_names.clone(),
            target_index: self.target_index,
            stats: StatsEntry {
                mean: self.stats.mean.data().to_vec(),
                std: self.stats.std.data().to_vec(),
            },
            params,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(PARAMS_FILE), blob)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::Checkpoint(format!("no checkpoint manifest at {}", manifest_path.display())));
        }
        let raw: serde_json::Value = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        match raw.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported checkpoint format version {v}"))),
            None => return Err(Error::Checkpoint("manifest lacks format_version".into())),
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let blob = fs::read(dir.join(PARAMS_FILE))?;
        if blob.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("parameter blob of {} bytes is not f64-aligned", blob.len())));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8 bytes")))
            .collect();

        let mut model = Conformer::new(manifest.config, manifest.dims)?;
        let store = model.store_mut();
        if manifest.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} parameters, the configured model has {}",
                manifest.params.len(),
                store.len()
            )));
        }
        for entry in manifest.params {
            let id = store
                .find(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", entry.name)))?;
            let n: usize = entry.shape.iter().product();
            let data = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("parameter '{}' runs past the blob", entry.name)))?;
            store
                .set(id, Tensor::new(entry.shape, data.to_vec())?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        let dx = model.dims().num_vars;
        if manifest.stats.mean.len() != dx || manifest.stats.std.len() != dx || manifest.target_index >= dx {
            return Err(Error::Checkpoint("statistics do not match the model's variables".into()));
        }
        let stats = StandardizeStats {
            mean: Tensor::new([dx], manifest.stats.mean)?,
            std: Tensor::new([dx], manifest.stats.std)?,
        };
        Ok(Checkpoint {
            model,
            stats,
            variable_names: manifest.variable_names,
            target_index: manifest.target_index,
        })
    }
}
