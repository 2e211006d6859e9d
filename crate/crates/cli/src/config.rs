//! Run configuration: one TOML file with a section per concern.
//!
//! A user file only needs the keys it changes. It is merged over the full
//! default configuration, and the merged result is written next to every
//! run's outputs so the run can be repeated from that file alone.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cimn_core::eval::experiments::{default_rhos, Hyperparameter};
use cimn_core::eval::Protocol;
use cimn_core::sampling::SplitMode;
use cimn_core::synthdata::GeneratorConfig;
use cimn_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const OUT_ROOT_ENV: &str = "CIMN_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub seed: u64,
    /// Identities with fewer images on their kept camera are dropped.
    pub min_images: usize,
    /// Target size of a `cg` split; 0 matches the `sct` split of the same data.
    pub size: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::Sct,
            seed: 0,
            min_images: 2,
            size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    /// Cross-camera fractions for the stability sweep.
    pub rhos: Vec<f64>,
    /// Weight varied by the hyperparameter sweep.
    pub param: Hyperparameter,
    /// Values for the hyperparameter sweep; empty selects the default grid.
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: (0..5).collect(),
            rhos: default_rhos(),
            param: Hyperparameter::Lambda,
            values: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            split: SplitConfig::default(),
            train: TrainConfig::desk(),
            protocol: Protocol::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Recursively overwrite `base` with the entries of `overlay`.
fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parse a possibly partial config, filling every missing key with its default.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overlay: toml::Value = toml::from_str(text)?;
        let mut value = toml::Value::try_from(RunConfig::default())?;
        merge(&mut value, overlay);
        let config: RunConfig = value.try_into()?;
        Ok(config)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        RunConfig::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Use `seed` for data, split and training; sweep seeds keep their count
    /// and start at `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.generator.seed = seed;
        self.split.seed = seed;
        self.train.seed = seed;
        let n = self.sweep.seeds.len().max(1) as u64;
        self.sweep.seeds = (seed..seed + n).collect();
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

/// Output directory: `out` (or `default`), placed under `root` when relative.
pub fn output_dir(out: Option<&Path>, default: &str, root: Option<&Path>) -> PathBuf {
    let dir = out.map_or_else(|| PathBuf::from(default), Path::to_path_buf);
    match root {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir,
    }
}

/// Output root from the environment, if set and non-empty.
pub fn env_out_root() -> Option<PathBuf> {
    env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

pub fn ensure_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}
