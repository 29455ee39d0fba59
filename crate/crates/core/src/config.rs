//! Pipeline configuration: a TOML document with one table per module.
//! Any key can be overridden with a dotted `path=value` assignment, e.g.
//! `association.gate=0.8` or `ik.velocity_limits=false`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{AssociationConfig, TrackContext};
use crate::ik::IkConfig;
use crate::observer::ObserverConfig;
use crate::scaling::{ProportionTable, ScaleConfig};
use crate::skeleton::{SkeletonError, SkeletonModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(String),
    #[error("override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] SkeletonError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Aggregator tick frequency (Hz).
    pub tick_rate: f64,
    /// Per-tick real-time budget (ms); ticks above it are counted as misses.
    pub latency_budget_ms: f64,
    /// Replay only: how long after a tick window closes the simulated
    /// aggregator waits for its batches (ms).
    pub replay_lag_ms: f64,
    /// Skeleton profile; the built-in profile when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skeleton_profile: Option<PathBuf>,
    /// Segment proportion table; the built-in table when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proportions: Option<PathBuf>,
    /// Worker threads for the per-track update; 0 uses every core.
    pub threads: usize,
    pub association: AssociationConfig,
    pub scaling: ScaleConfig,
    pub ik: IkConfig,
    pub observer: ObserverConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            tick_rate: 30.0,
            latency_budget_ms: 33.0,
            replay_lag_ms: 35.0,
            skeleton_profile: None,
            proportions: None,
            threads: 0,
            association: AssociationConfig::default(),
            scaling: ScaleConfig::default(),
            ik: IkConfig::default(),
            observer: ObserverConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Apply `path=value` assignments in order. Values are parsed as TOML
    /// (numbers, booleans, arrays, quoted strings); anything else is taken
    /// as a bare string.
    pub fn with_overrides<S: AsRef<str>>(self, overrides: &[S]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = toml::Table::try_from(&self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let err = |msg: &str| ConfigError::Override(item.to_string(), msg.to_string());
            let (key, raw) = item.split_once('=').ok_or_else(|| err("expected `path=value`"))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            if parts.iter().any(|p| p.is_empty()) {
                return Err(err("empty key segment"));
            }
            let value = parse_value(raw.trim());
            let (last, sections) = parts.split_last().expect("split yields one part");
            let mut table = &mut doc;
            for s in sections {
                table = table
                    .get_mut(*s)
                    .and_then(toml::Value::as_table_mut)
                    .ok_or_else(|| err(&format!("unknown section `{s}`")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: PipelineConfig = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tick_rate > 0.0 && self.tick_rate.is_finite()) {
            return Err(ConfigError::Invalid("tick_rate must be positive".into()));
        }
        if !(self.replay_lag_ms >= 0.0) {
            return Err(ConfigError::Invalid("replay_lag_ms must be non-negative".into()));
        }
        if !(self.latency_budget_ms > 0.0) {
            return Err(ConfigError::Invalid("latency_budget_ms must be positive".into()));
        }
        self.association
            .validate()
            .and_then(|_| self.scaling.validate())
            .and_then(|_| self.ik.validate())
            .and_then(|_| self.observer.validate())
            .map_err(ConfigError::Invalid)
    }

    pub fn tick_period(&self) -> f64 {
        1.0 / self.tick_rate
    }

    /// Load the skeleton and proportion table and bundle the module
    /// settings for track updates.
    pub fn track_context(&self) -> Result<TrackContext, ConfigError> {
        let template = match &self.skeleton_profile {
            Some(p) => SkeletonModel::load(p)?,
            None => SkeletonModel::default_profile(),
        };
        let table = match &self.proportions {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.clone(),
                    source,
                })?;
                ProportionTable::from_toml_str(&text)?
            }
            None => ProportionTable::default_table(),
        };
        let mut ik = self.ik.clone();
        ik.step_dt = self.tick_period();
        Ok(TrackContext {
            template,
            table,
            scaling: self.scaling.clone(),
            ik,
            observer: self.observer.clone(),
        })
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Configuration from an optional file plus overrides.
pub fn load_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<PipelineConfig, ConfigError> {
    let base = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    base.with_overrides(overrides)
}
