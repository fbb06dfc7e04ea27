//! Experiment configuration: one JSON document that pins the policy
//! architecture, adapter settings, training schedule, benchmark
//! parameters, curriculum, and the three independent seed streams.
//!
//! Unknown fields are rejected so a typo'd key fails loudly instead of
//! silently falling back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::AdapterSpec;
use crate::bench::{BenchParams, SuiteKind};
use crate::harness::{EvalConfig, TrainConfig};
use crate::policy::PolicySpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Independent seed streams: demo generation, optimization, and
/// evaluation rollouts never share randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig::from_root(0)
    }
}

impl SeedConfig {
    /// Expands one root seed into the three distinct streams.
    pub fn from_root(root: u64) -> Self {
        SeedConfig {
            data: crate::rng::derive_seed(root, "data", &[]),
            train: crate::rng::derive_seed(root, "train", &[]),
            eval: crate::rng::derive_seed(root, "eval", &[]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStageConfig {
    pub suite: SuiteKind,
    pub n_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub pretrain_tasks: usize,
    pub demos_per_task: usize,
    pub stages: Vec<CurriculumStageConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: PolicySpec,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    pub bench: BenchParams,
    pub curriculum: CurriculumConfig,
    pub seeds: SeedConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Desk profile: trains end-to-end in minutes on a laptop core count.
    pub fn desk() -> Self {
        let policy = PolicySpec::desk();
        let bench = BenchParams {
            embed_dim: policy.embed_dim,
            percep_dim: policy.percep_dim,
            ..BenchParams::default()
        };
        ExperimentConfig {
            policy,
            adapter: AdapterSpec::defaults(),
            train: TrainConfig::desk(),
            bench,
            curriculum: CurriculumConfig {
                pretrain_tasks: 4,
                demos_per_task: 20,
                stages: vec![
                    CurriculumStageConfig {
                        suite: SuiteKind::Spatial,
                        n_tasks: 4,
                    },
                    CurriculumStageConfig {
                        suite: SuiteKind::Goal,
                        n_tasks: 4,
                    },
                    CurriculumStageConfig {
                        suite: SuiteKind::Object,
                        n_tasks: 4,
                    },
                ],
            },
            seeds: SeedConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Paper-sized profile; parameter counts and schedule match the
    /// reference setup, runtime is not laptop-friendly.
    pub fn paper() -> Self {
        let policy = PolicySpec::paper();
        let bench = BenchParams {
            embed_dim: policy.embed_dim,
            percep_dim: policy.percep_dim,
            ..BenchParams::default()
        };
        ExperimentConfig {
            policy,
            adapter: AdapterSpec::defaults(),
            train: TrainConfig::paper(),
            bench,
            curriculum: CurriculumConfig {
                pretrain_tasks: 4,
                demos_per_task: 50,
                stages: vec![
                    CurriculumStageConfig {
                        suite: SuiteKind::Spatial,
                        n_tasks: 4,
                    },
                    CurriculumStageConfig {
                        suite: SuiteKind::Goal,
                        n_tasks: 4,
                    },
                    CurriculumStageConfig {
                        suite: SuiteKind::Object,
                        n_tasks: 4,
                    },
                    CurriculumStageConfig {
                        suite: SuiteKind::LongHorizon,
                        n_tasks: 4,
                    },
                ],
            },
            seeds: SeedConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: ExperimentConfig =
            serde_json::from_slice(&bytes).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: &Path) -> Result<(), ConfigError> {
        let json = serde_json::to_vec_pretty(self).expect("config serializes");
        std::fs::write(path, json).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.policy
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.policy.embed_dim != self.bench.embed_dim {
            return Err(ConfigError::Invalid(format!(
                "policy.embed_dim ({}) must match bench.embed_dim ({})",
                self.policy.embed_dim, self.bench.embed_dim
            )));
        }
        if self.policy.percep_dim != self.bench.percep_dim {
            return Err(ConfigError::Invalid(format!(
                "policy.percep_dim ({}) must match bench.percep_dim ({})",
                self.policy.percep_dim, self.bench.percep_dim
            )));
        }
        if self.curriculum.pretrain_tasks == 0 || self.curriculum.demos_per_task == 0 {
            return Err(ConfigError::Invalid(
                "curriculum needs at least one pretrain task and one demo per task".into(),
            ));
        }
        if self.curriculum.stages.is_empty() {
            return Err(ConfigError::Invalid("curriculum has no stages".into()));
        }
        for st in &self.curriculum.stages {
            if st.n_tasks == 0 {
                return Err(ConfigError::Invalid(format!(
                    "stage {:?} has zero tasks",
                    st.suite
                )));
            }
        }
        if self.eval.episodes == 0 {
            return Err(ConfigError::Invalid("eval.episodes must be >= 1".into()));
        }
        let s = &self.seeds;
        if s.data == s.train || s.data == s.eval || s.train == s.eval {
            return Err(ConfigError::Invalid(
                "data, train and eval seeds must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
    }

    #[test]
    fn roundtrip_and_unknown_field_rejection() {
        let dir = std::env::temp_dir().join("tail-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cfg.json");
        let cfg = ExperimentConfig::desk();
        cfg.to_file(&path).unwrap();
        let loaded = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg, loaded);

        let mut doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        doc["trian"] = serde_json::json!({});
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        assert!(matches!(
            ExperimentConfig::from_file(&path),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn seed_collisions_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.seeds.train = cfg.seeds.data;
        assert!(cfg.validate().is_err());
    }
}
