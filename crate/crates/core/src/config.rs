//! Run configuration file.
//!
//! A TOML file with the sections `schedule`, `model`, `train`, `data` and
//! `scg`; every key may also be written in dotted form (`train.steps = 10`)
//! and overridden from the command line with `key=value`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{build_schedule, DiffusionSchedule, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub kappa: f64,
    pub eta_min: f64,
    pub eta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, kappa: 2.0, eta_min: 1e-3, eta_max: 0.999 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.kappa, self.eta_min, self.eta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Folder of training PNGs; when absent a synthetic set is generated.
    pub train_dir: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
    /// `bicubic`, `learned` (pretrained at the start of the run) or the
    /// path of a saved base model.
    pub base_model: String,
    pub base_epochs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            synthetic_count: 64,
            synthetic_size: 64,
            synthetic_seed: 0,
            base_model: "bicubic".into(),
            base_epochs: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub scg: SamplerConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut value: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule.build()?;
        self.model.validate()?;
        if self.model.max_timestep != sched.n_steps() {
            return Err(Error::Config(format!(
                "model.max_timestep ({}) must equal schedule.steps ({})",
                self.model.max_timestep,
                sched.n_steps()
            )));
        }
        if (self.model.max_scale - self.train.fixed_scale).abs() > 1e-12 {
            return Err(Error::Config("model.max_scale must equal train.fixed_scale".into()));
        }
        self.train.validate(&sched)?;
        self.scg.validate()?;
        Ok(())
    }

    /// Every setting as sorted `key = value` lines with dotted keys.
    pub fn to_flat(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        Ok(lines.join("\n") + "\n")
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Sets a dotted key; the value is parsed as TOML and falls back to a
/// bare string.
pub fn apply_override(root: &mut toml::Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key}: parent is not a section")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
