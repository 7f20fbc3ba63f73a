//! Run configuration file.

use std::path::{Path, PathBuf};

use emem::data::SyntheticConfig;
use emem::encoder::{BaseTrainConfig, EncoderConfig};
use emem::ndt::{NdtConfig, NdtTrainConfig};
use emem::tree::Linkage;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Artifact locations. Relative entries in a config file resolve against
/// the directory holding that file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
    pub label_embeddings: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub tree: Option<PathBuf>,
    pub banks: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

impl Paths {
    fn rebase(&mut self, dir: &Path) {
        for p in [
            &mut self.data,
            &mut self.taxonomy,
            &mut self.label_embeddings,
            &mut self.encoder,
            &mut self.tree,
            &mut self.banks,
            &mut self.model,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSettings {
    pub linkage: Linkage,
    /// Width of the built-in description embedding.
    pub embedding_width: usize,
    pub embedding_seed: u64,
}

impl Default for TreeSettings {
    fn default() -> Self {
        TreeSettings {
            linkage: Linkage::Average,
            embedding_width: 256,
            embedding_seed: 0,
        }
    }
}

/// Everything a pipeline run needs. The single `seed` drives data
/// generation, the train/test split and every training stage; the `seed`
/// fields of the nested sections are overwritten by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub train_fraction: f64,
    pub frame_rate_hz: f64,
    /// Worker cap; 0 uses every core.
    pub threads: usize,
    pub eta: f64,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub base_train: BaseTrainConfig,
    pub tree: TreeSettings,
    pub ndt: NdtConfig,
    pub ndt_train: NdtTrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: None,
            train_fraction: 0.8,
            frame_rate_hz: 10.0,
            threads: 0,
            eta: 0.7,
            synthetic: SyntheticConfig::default(),
            encoder: EncoderConfig::default(),
            base_train: BaseTrainConfig::default(),
            tree: TreeSettings::default(),
            ndt: NdtConfig::default(),
            ndt_train: NdtTrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::data(format!(
                "{}: unsupported schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(dir);
        Ok(cfg)
    }

    /// Seed after flag overrides; a run without one is a usage error.
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Usage("a seed is required: pass --seed or set \"seed\" in the config".into()))
    }

    /// Pushes the run seed and thread cap into the nested sections.
    pub fn propagate(&mut self) {
        if let Some(seed) = self.seed {
            self.base_train.seed = seed;
            self.ndt.seed = seed;
            self.ndt_train.seed = seed;
        }
        self.base_train.threads = self.threads;
        self.ndt_train.threads = self.threads;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.eta, 0.7);
        assert_eq!(back.ndt.rho, 30.0);
    }

    #[test]
    fn partial_file_fills_defaults_and_rebases_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"schema_version": 1, "seed": 3, "paths": {"data": "d.jsonl"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.train_fraction, 0.8);
        assert_eq!(cfg.paths.data.unwrap(), dir.path().join("d.jsonl"));
    }

    #[test]
    fn rejects_unknown_schema_and_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"schema_version": 2}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Data(_))));
        std::fs::write(&path, r#"{"schema_version": 1, "sede": 3}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Data(_))));
    }

    #[test]
    fn seed_is_mandatory_and_propagates() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.require_seed(), Err(CliError::Usage(_))));
        cfg.seed = Some(11);
        cfg.threads = 2;
        cfg.propagate();
        assert_eq!(cfg.base_train.seed, 11);
        assert_eq!(cfg.ndt.seed, 11);
        assert_eq!(cfg.ndt_train.threads, 2);
    }
}
