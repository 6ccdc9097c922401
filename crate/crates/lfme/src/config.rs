//! Run configuration: a TOML file with sections for the data generator,
//! the cardinality split, and the three training stages. Unknown keys are
//! rejected; the resolved (post-default) config is echoed into the run
//! directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distribution::{ClassDistribution, GeneratorSpec, Profile};
use crate::error::{Error, Result};
use crate::metrics::{self, LogBase};
use crate::sampling::SamplerMode;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub log_base: LogBase,
    pub generator: GeneratorSpec,
    pub split: SplitConfig,
    pub expert: TrainConfig,
    pub plain: TrainConfig,
    pub student: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: None,
            log_base: LogBase::Natural,
            generator: GeneratorSpec {
                num_classes: 30,
                max_cardinality: 100,
                min_cardinality: 1,
                profile: Profile::Exponential,
                feature_dim: 16,
                class_separation: 3.0,
                seed: 1,
                eval_per_class: 20,
            },
            split: SplitConfig::default(),
            expert: TrainConfig {
                sampler: SamplerMode::InstanceRandom,
                ..TrainConfig::default()
            },
            plain: TrainConfig {
                sampler: SamplerMode::InstanceRandom,
                ..TrainConfig::default()
            },
            student: TrainConfig {
                sampler: SamplerMode::ClassBalanced,
                ..TrainConfig::default()
            },
        }
    }
}

/// Split thresholds, either explicit counts or cardinality quantiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub thresholds: Option<Vec<u64>>,
    pub quantiles: Option<Vec<f64>>,
}

impl SplitConfig {
    /// Concrete thresholds for the given distribution. Explicit thresholds
    /// win; otherwise quantiles (default 33%/66%) are mapped to counts.
    pub fn resolve(&self, dist: &ClassDistribution) -> Result<Vec<u64>> {
        if let Some(t) = &self.thresholds {
            return Ok(t.clone());
        }
        let quantiles = self.quantiles.clone().unwrap_or_else(|| vec![0.33, 0.66]);
        metrics::quantile_thresholds(dist, &quantiles)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolved config as TOML, suitable for echoing into the run directory.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the resolved config, recorded in reports.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml()?.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

/// Named ablation arms for the student trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Fix every expert weight at 1 (plain knowledge distillation).
    NoSpes,
    /// Fix every instance weight at 1 (no curriculum).
    NoCurriculum,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-spes" => Ok(Ablation::NoSpes),
            "no-curriculum" => Ok(Ablation::NoCurriculum),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected no-spes or no-curriculum)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::ScheduleKind;

    #[test]
    fn defaults_match_headline_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.student.temperature, 2.0);
        assert_eq!(cfg.student.alpha, 0.6);
        assert_eq!(cfg.student.schedule, ScheduleKind::Linear);
        assert_eq!(cfg.student.momentum, 0.9);
        assert_eq!(cfg.student.weight_decay, 5e-4);
        assert_eq!(cfg.student.sampler, SamplerMode::ClassBalanced);
        assert_eq!(cfg.expert.sampler, SamplerMode::InstanceRandom);
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let err = RunConfig::parse("bogus_key = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(RunConfig::parse("[student]\nnot_a_field = 2\n").is_err());
    }

    #[test]
    fn roundtrip_and_stable_hash() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn split_resolution() {
        let dist = ClassDistribution::from_counts(&[5, 10, 50, 200]).unwrap();
        let explicit = SplitConfig {
            thresholds: Some(vec![20, 100]),
            quantiles: None,
        };
        assert_eq!(explicit.resolve(&dist).unwrap(), vec![20, 100]);
        let quantile = SplitConfig {
            thresholds: None,
            quantiles: Some(vec![0.25, 0.75]),
        };
        assert_eq!(quantile.resolve(&dist).unwrap(), vec![10, 200]);
    }
}
