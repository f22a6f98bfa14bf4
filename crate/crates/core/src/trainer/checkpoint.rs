use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::Adam;
use crate::diffengine::{ParamSet, Shape, Tensor};
use crate::error::{Error, Result};

const FORMAT: u32 = 1;

/// Everything needed to continue training or evaluate: parameters (including
/// the prototype bank and `η`), Adam moments, progress counters and config.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub params: ParamSet,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config_hash: String,
    epoch: usize,
    step: usize,
    adam_t: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    tensors: Vec<Entry>,
    config: TrainConfig,
}

/// `stem.json` and `stem.bin` paths.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

impl Checkpoint {
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for (group, set) in [("param", &self.params), ("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, t) in set.iter() {
                tensors.push(Entry {
                    group: group.into(),
                    name: name.into(),
                    rows: t.rows(),
                    cols: t.cols(),
                    offset: blob.len() / 8,
                });
                for x in t.data() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT,
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            step: self.step,
            adam_t: self.adam.t,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
            tensors,
            config: self.config.clone(),
        };
        let (json, bin) = checkpoint_paths(stem);
        if let Some(dir) = json.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
        std::fs::write(bin, blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, bin) = checkpoint_paths(stem);
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&json)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
        }
        let hash = manifest.config.hash()?;
        if hash != manifest.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let raw = std::fs::read(&bin)?;
        if raw.len() % 8 != 0 {
            return Err(Error::Checkpoint("binary blob is not a whole number of f64".into()));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        for e in &manifest.tensors {
            let k = match e.group.as_str() {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                g => return Err(Error::Checkpoint(format!("unknown tensor group `{g}`"))),
            };
            let end = e.offset + e.rows * e.cols;
            let data = values
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` runs past the blob", e.name)))?;
            sets[k].insert(e.name.clone(), Tensor::new(Shape::new(e.rows, e.cols), data.to_vec())?)?;
        }
        let [params, m, v] = sets;
        Ok(Checkpoint {
            config: manifest.config,
            config_hash: manifest.config_hash,
            epoch: manifest.epoch,
            step: manifest.step,
            params,
            adam: Adam {
                beta1: manifest.adam_beta1,
                beta2: manifest.adam_beta2,
                eps: manifest.adam_eps,
                t: manifest.adam_t,
                m,
                v,
            },
        })
    }

    /// Errors unless `params` has exactly the tensors the config would create.
    pub fn check_compatible(&self) -> Result<()> {
        let fresh = super::model::init_params(&self.config)?;
        for (name, t) in fresh.iter() {
            let have = self
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if have.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has shape {}", have.shape())));
            }
        }
        if fresh.len() != self.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(())
    }
}
