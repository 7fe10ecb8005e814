//! Safetensors checkpoints with JSON metadata.
//!
//! Tensors are stored under `params.*`, `base.*` and, for resumable
//! training checkpoints, `adam.m.*` / `adam.v.*`. Everything needed to
//! rebuild the sampler (network config, schedule, base model kind) travels
//! in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor, Var};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::base_sr::{BaseSRModel, LearnedBase, LearnedBaseConfig};
use crate::denoiser::{DenoiserConfig, DenoiserParams, ParamStore};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::trainer::{TrainConfig, TrainState};

pub const FORMAT: &str = "cascade-sr";
pub const VERSION: u32 = 1;

const PARAMS: &str = "params.";
const BASE: &str = "base_params.";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum BaseSpec {
    Bicubic,
    Learned { config: LearnedBaseConfig },
}

/// Optimizer state carried by training checkpoints.
#[derive(Debug, Clone)]
pub struct Resume {
    pub adam: Adam,
    pub step: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub schedule: DiffusionSchedule,
    pub base: BaseSRModel,
    pub resume: Option<Resume>,
}

impl Checkpoint {
    pub fn into_train_state(self) -> Result<TrainState> {
        let resume = self
            .resume
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Ok(TrainState {
            params: self.params,
            adam: resume.adam,
            step: resume.step,
            config: resume.config,
        })
    }
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

fn base_entries(base: &BaseSRModel, meta: &mut HashMap<String, String>, tensors: &mut Vec<(String, Tensor)>) -> Result<()> {
    let spec = match base {
        BaseSRModel::Bicubic => BaseSpec::Bicubic,
        BaseSRModel::Learned(net) => {
            for (name, var) in net.store.iter() {
                tensors.push((format!("{BASE}{name}"), var.as_tensor().clone()));
            }
            BaseSpec::Learned { config: net.config.clone() }
        }
    };
    meta.insert("base".into(), json(&spec)?);
    Ok(())
}

fn write(path: &Path, kind: &str, mut meta: HashMap<String, String>, tensors: Vec<(String, Tensor)>) -> Result<()> {
    meta.insert("format".into(), FORMAT.into());
    meta.insert("version".into(), VERSION.to_string());
    meta.insert("kind".into(), kind.into());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    // Write-then-rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves network, schedule and base model; with `resume`, also the
/// optimizer state needed to continue training bit-for-bit.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    base: &BaseSRModel,
    resume: Option<(&Adam, u64, &TrainConfig)>,
) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("denoiser_config".into(), json(&params.config)?);
    meta.insert("schedule".into(), json(schedule)?);
    let mut tensors: Vec<(String, Tensor)> = params
        .store
        .iter()
        .map(|(name, var)| (format!("{PARAMS}{name}"), var.as_tensor().clone()))
        .collect();
    base_entries(base, &mut meta, &mut tensors)?;
    if let Some((adam, step, config)) = resume {
        meta.insert("step".into(), step.to_string());
        meta.insert("adam_steps".into(), adam.steps.to_string());
        meta.insert("train_config".into(), json(config)?);
        for (name, m) in &adam.first {
            tensors.push((format!("{ADAM_M}{name}"), m.clone()));
        }
        for (name, v) in &adam.second {
            tensors.push((format!("{ADAM_V}{name}"), v.clone()));
        }
    }
    write(path.as_ref(), "denoiser", meta, tensors)
}

pub fn save_train_state(path: impl AsRef<Path>, state: &TrainState, schedule: &DiffusionSchedule, base: &BaseSRModel) -> Result<()> {
    save_checkpoint(path, &state.params, schedule, base, Some((&state.adam, state.step, &state.config)))
}

/// Saves a base model on its own.
pub fn save_base(path: impl AsRef<Path>, base: &BaseSRModel) -> Result<()> {
    let mut meta = HashMap::new();
    let mut tensors = Vec::new();
    base_entries(base, &mut meta, &mut tensors)?;
    write(path.as_ref(), "base", meta, tensors)
}

struct Loaded {
    meta: HashMap<String, String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Loaded {
    fn read(path: &Path, kind: &str) -> Result<Self> {
        let bytes = fs::read(path)?;
        let corrupt = |e: safetensors::SafeTensorError| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(corrupt)?;
        let meta = header.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(Error::Checkpoint(format!("{} is not a {FORMAT} checkpoint", path.display())));
        }
        let version = meta.get("version").cloned().unwrap_or_default();
        if version != VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version}, expected {VERSION}",
                path.display()
            )));
        }
        let found = meta.get("kind").cloned().unwrap_or_default();
        if found != kind {
            return Err(Error::Checkpoint(format!("{}: expected a {kind} checkpoint, found {found}", path.display())));
        }
        let st = SafeTensors::deserialize(&bytes).map_err(corrupt)?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view.load(&Device::Cpu)?);
        }
        Ok(Self { meta, tensors })
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata entry {key}")))?;
        serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("metadata {key}: {e}")))
    }

    fn with_prefix(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        Ok(self
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect())
    }

    fn store(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in self.with_prefix(prefix)? {
            store.insert(name, Var::from_tensor(&t)?);
        }
        Ok(store)
    }

    fn base(&self) -> Result<BaseSRModel> {
        Ok(match self.meta::<BaseSpec>("base")? {
            BaseSpec::Bicubic => BaseSRModel::Bicubic,
            BaseSpec::Learned { config } => {
                BaseSRModel::Learned(Box::new(LearnedBase::from_store(config, self.store(BASE)?)?))
            }
        })
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let loaded = Loaded::read(path.as_ref(), "denoiser")?;
    let config: DenoiserConfig = loaded.meta("denoiser_config")?;
    let params = DenoiserParams { config, store: loaded.store(PARAMS)? };
    // Building the network validates every parameter name and shape.
    crate::denoiser::Denoiser::new(&params)?;
    let schedule: DiffusionSchedule = loaded.meta("schedule")?;
    let base = loaded.base()?;
    let resume = match loaded.meta.get("step") {
        None => None,
        Some(step) => {
            let parse = |v: &str| v.parse::<u64>().map_err(|e| Error::Checkpoint(format!("bad counter {v}: {e}")));
            let config: TrainConfig = loaded.meta("train_config")?;
            let mut adam = Adam::new(config.adam);
            adam.steps = parse(loaded.meta.get("adam_steps").map(String::as_str).unwrap_or("0"))?;
            adam.first = loaded.with_prefix(ADAM_M)?;
            adam.second = loaded.with_prefix(ADAM_V)?;
            Some(Resume { adam, step: parse(step)?, config })
        }
    };
    Ok(Checkpoint { params, schedule, base, resume })
}

pub fn load_base(path: impl AsRef<Path>) -> Result<BaseSRModel> {
    Loaded::read(path.as_ref(), "base")?.base()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let params = init_params(&DenoiserConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let sched = DiffusionSchedule::default();
        let path = dir.path().join("a.safetensors");
        save_checkpoint(&path, &params, &sched, &BaseSRModel::Bicubic, None).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.params.config, params.config);
        assert_eq!(back.params.store.to_bytes().unwrap(), params.store.to_bytes().unwrap());
        assert_eq!(back.schedule, sched);
        assert!(!back.base.is_learned());
        assert!(back.resume.is_none());
    }

    #[test]
    fn rejects_foreign_and_mismatched_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("base.safetensors");
        save_base(&path, &BaseSRModel::Bicubic).unwrap();
        assert!(load_base(&path).is_ok());
        // A base file is not a denoiser checkpoint.
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let junk = dir.path().join("junk.safetensors");
        fs::write(&junk, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&junk).is_err());
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("old.safetensors");
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("version".to_string(), "0".to_string());
        meta.insert("kind".to_string(), "base".to_string());
        let bytes = safetensors::serialize(Vec::<(&str, &Tensor)>::new(), Some(meta)).unwrap();
        fs::write(&path, bytes).unwrap();
        let err = load_base(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
