//! Experiment configuration and run manifests. Configs are strict JSON:
//! unknown fields are rejected so a typo in a hyperparameter name cannot
//! silently fall back to a default.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::eval::Arm;
use crate::gan::GanTrainConfig;
use crate::spl::SplConfig;

fn d_n_shot() -> Vec<usize> {
    vec![1]
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn d_arms() -> Vec<Arm> {
    Arm::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub gan: GanTrainConfig,
    #[serde(default)]
    pub spl: SplConfig,
    #[serde(default = "d_n_shot")]
    pub n_shot: Vec<usize>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_arms")]
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Everything defaulted except the world seed.
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            world: WorldConfig::with_seed(seed),
            gan: GanTrainConfig::default(),
            spl: SplConfig::default(),
            n_shot: d_n_shot(),
            seeds: d_seeds(),
            arms: d_arms(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.gan.validate()?;
        self.spl.validate()?;
        if self.n_shot.is_empty() {
            return Err(Error::InvalidConfig {
                field: "n_shot".into(),
                reason: "need at least one n value".into(),
            });
        }
        for &n in &self.n_shot {
            if n == 0 || n > self.world.samples_per_novel_train {
                return Err(Error::InvalidConfig {
                    field: "n_shot".into(),
                    reason: format!(
                        "n={n} outside [1, {}]",
                        self.world.samples_per_novel_train
                    ),
                });
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig {
                field: "seeds".into(),
                reason: "need at least one seed".into(),
            });
        }
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig {
                field: "arms".into(),
                reason: "need at least one arm".into(),
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Hash of the canonical (parsed, re-serialized) config document.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialization cannot fail");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// What a command produced: artifact paths, stage timings, and the config
/// hash tying outputs to their inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(config_hash: String) -> Self {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            artifacts: BTreeMap::new(),
            stage_seconds: BTreeMap::new(),
        }
    }

    pub fn add_artifact(&mut self, name: &str, path: &Path) {
        self.artifacts.insert(name.to_string(), path.to_path_buf());
    }

    pub fn add_timing(&mut self, stage: &str, seconds: f64) {
        self.stage_seconds
            .insert(stage.to_string(), (seconds * 1000.0).round() / 1000.0);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialization cannot fail");
        fs::write(path, json).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let json = r#"{"world": {"seed": 7}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.world.seed, 7);
        assert_eq!(cfg.world.num_base_classes, 40);
        assert_eq!(cfg.gan.epochs, 300);
        assert_eq!(cfg.spl.iterations, 30);
        assert_eq!(cfg.n_shot, vec![1]);
        assert_eq!(cfg.seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(cfg.arms.len(), 4);
    }

    #[test]
    fn unknown_field_is_rejected_by_name() {
        let json = r#"{"world": {"seed": 1}, "gann": {}}"#;
        let err = serde_json::from_str::<ExperimentConfig>(json).unwrap_err();
        assert!(err.to_string().contains("gann"), "message: {err}");
        // nested unknown fields too
        let json = r#"{"world": {"seed": 1, "captoin_dim": 4}}"#;
        let err = serde_json::from_str::<ExperimentConfig>(json).unwrap_err();
        assert!(err.to_string().contains("captoin_dim"), "message: {err}");
    }

    #[test]
    fn missing_seed_is_named_in_the_error() {
        let json = r#"{"world": {}}"#;
        let err = serde_json::from_str::<ExperimentConfig>(json).unwrap_err();
        assert!(err.to_string().contains("seed"), "message: {err}");
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.n_shot = vec![0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.n_shot = vec![99];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.gan.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::with_seed(1);
        cfg.spl.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_format_insensitive() {
        let a: ExperimentConfig = serde_json::from_str(r#"{"world": {"seed": 3}}"#).unwrap();
        let b: ExperimentConfig =
            serde_json::from_str("{\n  \"world\": {\n    \"seed\": 3\n  }\n}").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c: ExperimentConfig = serde_json::from_str(r#"{"world": {"seed": 4}}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
