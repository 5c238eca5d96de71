//! TOML configuration. Unknown keys are rejected; every section is optional
//! and falls back to the documented defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embed::{MlpConfig, PoolMode, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::features::FeatureConfig;
use crate::gating::{GatingPolicy, DEFAULT_REASON_CODES};
use crate::logreg::TrainConfig;
use crate::riskalign::{AlignConfig, ScoreMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub models: PathBuf,
    pub logs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus.jsonl".into(),
            models: "models".into(),
            logs: "logs".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub synthetic: u64,
    pub resample: u64,
    pub train: u64,
    pub embed: u64,
    pub baseline: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            synthetic: 1,
            resample: 2,
            train: 3,
            embed: 4,
            baseline: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResampleSection {
    pub negatives_per_positive: usize,
}

impl Default for ResampleSection {
    fn default() -> Self {
        ResampleSection {
            negatives_per_positive: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    pub pool: PoolMode,
    pub max_len: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            pool: PoolMode::Maxpool,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskalignSection {
    pub score_mode: ScoreMode,
    pub train: AlignConfig,
}

/// Commands of external providers. When absent the in-process reference
/// models are used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Providers {
    pub embedding: Option<Vec<String>>,
    pub next_token: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Escalation {
    pub reason_codes: Vec<String>,
}

impl Default for Escalation {
    fn default() -> Self {
        Escalation {
            reason_codes: DEFAULT_REASON_CODES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub paths: Paths,
    pub features: FeatureConfig,
    pub policy: GatingPolicy,
    /// Model whose capture the others are compared against.
    pub baseline_model: String,
    pub split: Option<SplitSpec>,
    pub seeds: Seeds,
    pub resample: ResampleSection,
    pub logreg: TrainConfig,
    pub mlp: MlpConfig,
    pub embed: EmbedSection,
    pub riskalign: RiskalignSection,
    pub providers: Providers,
    pub escalation: Escalation,
    /// Path prefix to org for git ingestion.
    pub org_map: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            paths: Paths::default(),
            features: FeatureConfig::default(),
            policy: GatingPolicy::default(),
            baseline_model: "logreg".into(),
            split: None,
            seeds: Seeds::default(),
            resample: ResampleSection::default(),
            logreg: TrainConfig::default(),
            mlp: MlpConfig::default(),
            embed: EmbedSection::default(),
            riskalign: RiskalignSection::default(),
            providers: Providers::default(),
            escalation: Escalation::default(),
            org_map: BTreeMap::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.policy.validate()?;
        if let Some(split) = &self.split {
            split.validate()?;
        }
        if self.resample.negatives_per_positive == 0 {
            return Err(Error::InvalidConfig("negatives_per_positive must be at least 1".into()));
        }
        if self.embed.max_len == 0 {
            return Err(Error::InvalidConfig("embed.max_len must be positive".into()));
        }
        if self.escalation.reason_codes.is_empty() {
            return Err(Error::InvalidConfig("at least one escalation reason code is required".into()));
        }
        for cmd in [&self.providers.embedding, &self.providers.next_token].into_iter().flatten() {
            if cmd.is_empty() {
                return Err(Error::InvalidConfig("provider command is empty".into()));
            }
        }
        if !(self.logreg.learning_rate > 0.0 && self.logreg.l2 >= 0.0) {
            return Err(Error::InvalidConfig("logreg needs learning_rate > 0 and l2 >= 0".into()));
        }
        if !(self.mlp.learning_rate > 0.0 && self.mlp.batch_size > 0) {
            return Err(Error::InvalidConfig("mlp needs learning_rate > 0 and batch_size > 0".into()));
        }
        if !self.riskalign.train.buckets.is_power_of_two() {
            return Err(Error::InvalidConfig("riskalign.buckets must be a power of two".into()));
        }
        Ok(())
    }
}
