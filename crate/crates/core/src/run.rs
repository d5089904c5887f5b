//! Run configuration and dataset plumbing shared by the command-line tool and tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ingest_csv, split, synth_field, Dataset, SynthKind, SynthParams};
use crate::error::{Error, Result};
use crate::geo::DEFAULT_Z_MAX_KM;
use crate::modality::Registry;
use crate::model::{ModelConfig, Preset};
use crate::train::TrainConfig;

pub const REGISTRY_FILE: &str = "registry.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Named preset; ignored when `model` is given.
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Directory of per-modality CSVs; relative paths resolve against the config file.
    pub data_dir: PathBuf,
    /// Registry JSON; defaults to `<data_dir>/registry.json`.
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.05
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = std::path::absolute(path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))
            .map_err(|e| Error::io(path, e))?;
        if cfg.data_dir.is_relative() {
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if let Some(r) = &cfg.registry {
            if r.is_relative() {
                cfg.registry = Some(base.join(r));
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Model config with the run seed applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut cfg = match (&self.model, self.preset) {
            (Some(m), _) => m.clone(),
            (None, Some(p)) => p.config(),
            (None, None) => return Err(Error::Config("run config needs a preset or a model".into())),
        };
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn registry_path(&self) -> PathBuf {
        self.registry.clone().unwrap_or_else(|| self.data_dir.join(REGISTRY_FILE))
    }
}

/// Train and test splits indexed by modality id.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

/// Reads every registered modality from `dir` and splits each one.
pub fn load_splits(dir: &Path, registry: &Registry, test_fraction: f64, seed: u64) -> Result<Splits> {
    let mut train = Vec::with_capacity(registry.len());
    let mut test = Vec::with_capacity(registry.len());
    for spec in registry.iter() {
        let ds = ingest_csv(&dir.join(spec.file_name()), spec, DEFAULT_Z_MAX_KM)?;
        let (a, b) = split(&ds, test_fraction, seed)?;
        train.push(a);
        test.push(b);
    }
    Ok(Splits { train, test })
}

/// Writes the four synthetic modalities and their registry into `dir`.
pub fn write_synthetic(dir: &Path, n_points: usize, seed: u64) -> Result<Registry> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let registry = Registry::synthetic();
    let params = SynthParams::default();
    for (kind, spec) in SynthKind::ALL.iter().zip(registry.iter()) {
        let ds = synth_field(*kind, &params, n_points, seed)?;
        ds.write_csv(&dir.join(spec.file_name()), spec)?;
    }
    registry.save(&dir.join(REGISTRY_FILE))?;
    Ok(registry)
}

/// In-memory synthetic splits, matching what `write_synthetic` + `load_splits` produce
/// up to CSV float formatting.
pub fn synthetic_splits(n_points: usize, seed: u64, test_fraction: f64, split_seed: u64) -> Result<Splits> {
    let params = SynthParams::default();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for kind in SynthKind::ALL {
        let ds = synth_field(kind, &params, n_points, seed)?;
        let (a, b) = split(&ds, test_fraction, split_seed)?;
        train.push(a);
        test.push(b);
    }
    Ok(Splits { train, test })
}
