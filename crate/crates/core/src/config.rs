use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fraction::Fraction;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid configuration: `{field}` {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { field: field.into(), reason: reason.into() }
    }
}

fn default_tau() -> f64 {
    1.0
}

fn default_conflict_threshold() -> f64 {
    0.2
}

fn default_max_rounds() -> u32 {
    3
}

fn default_parallelism() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Loop parameters and ensemble membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Selection-ratio threshold; the loop stops once `|S| / |P| >= tau`.
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_conflict_threshold")]
    pub conflict_threshold: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    pub anchor: String,
    pub assistants: Vec<String>,
    /// Give samples rejected in the round that met `tau` one more
    /// regeneration before finalizing them.
    #[serde(default = "default_true")]
    pub always_reflect_rejected: bool,
}

impl PipelineConfig {
    pub fn new(anchor: impl Into<String>, assistants: Vec<String>) -> Self {
        Self {
            tau: default_tau(),
            conflict_threshold: default_conflict_threshold(),
            max_rounds: default_max_rounds(),
            parallelism: default_parallelism(),
            seed: 0,
            anchor: anchor.into(),
            assistants,
            always_reflect_rejected: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tau > 0.0 && self.tau <= 1.0) || Fraction::from_decimal(self.tau).is_none() {
            return Err(ConfigError::new("tau", format!("must be in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.conflict_threshold) || Fraction::from_decimal(self.conflict_threshold).is_none() {
            return Err(ConfigError::new(
                "conflict_threshold",
                format!("must be in [0, 1], got {}", self.conflict_threshold),
            ));
        }
        if self.max_rounds == 0 {
            return Err(ConfigError::new("max_rounds", "must be at least 1"));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::new("parallelism", "must be at least 1"));
        }
        if self.anchor.trim().is_empty() {
            return Err(ConfigError::new("anchor", "must be a nonempty agent id"));
        }
        if self.assistants.is_empty() {
            return Err(ConfigError::new("assistants", "must list at least one agent"));
        }
        if self.assistants.contains(&self.anchor) {
            return Err(ConfigError::new("assistants", "must not contain the anchor"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.assistants {
            if !seen.insert(a) {
                return Err(ConfigError::new("assistants", format!("duplicate agent id `{a}`")));
            }
        }
        Ok(())
    }

    pub fn tau_fraction(&self) -> Fraction {
        Fraction::from_decimal(self.tau).unwrap_or(Fraction::one())
    }

    pub fn threshold_fraction(&self) -> Fraction {
        Fraction::from_decimal(self.conflict_threshold).unwrap_or(Fraction::new(1, 5).expect("nonzero"))
    }
}
