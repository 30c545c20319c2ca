//! Run configuration shared by the command-line tool and the examples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocator::{BelowMinimum, BudgetOptions, EndpointRule, DEFAULT_MIN_RATIO, DEFAULT_WINDOW};
use crate::codebook::{DEFAULT_KEY_THRESHOLD, DEFAULT_VALUE_THRESHOLD};
use crate::error::{config_err, Result};
use crate::eviction::GqaMode;
use crate::pipeline::CompressionOptions;

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "SPINDLEKV_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ratio: f64,
    pub window_len: usize,
    pub key_threshold: f64,
    pub value_threshold: f64,
    pub min_ratio: f64,
    pub gqa_mode: GqaMode,
    /// Use the published deep-layer endpoint `1 - 2 r_c`.
    pub strict_paper: bool,
    pub below_minimum: BelowMinimum,
    pub seed: u64,
    pub workers: Option<usize>,
    pub apply_rope: bool,
    pub steps: usize,
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            window_len: DEFAULT_WINDOW,
            key_threshold: DEFAULT_KEY_THRESHOLD,
            value_threshold: DEFAULT_VALUE_THRESHOLD,
            min_ratio: DEFAULT_MIN_RATIO,
            gqa_mode: GqaMode::PerHeadUnfolded,
            strict_paper: false,
            below_minimum: BelowMinimum::Fail,
            seed: 0,
            workers: None,
            apply_rope: false,
            steps: 16,
            tolerance: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(config_err(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        for (name, t) in [("key_threshold", self.key_threshold), ("value_threshold", self.value_threshold)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(config_err(format!("{name} {t} outside (0, 1)")));
            }
        }
        if !(self.min_ratio > 0.0 && self.min_ratio < 1.0) {
            return Err(config_err(format!("min_ratio {} outside (0, 1)", self.min_ratio)));
        }
        if self.window_len == 0 {
            return Err(config_err("window_len must be positive"));
        }
        if self.workers == Some(0) {
            return Err(config_err("workers must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(config_err("tolerance must be non-negative"));
        }
        Ok(())
    }

    pub fn compression_options(&self) -> CompressionOptions {
        CompressionOptions {
            ratio: self.ratio,
            window_len: self.window_len,
            key_threshold: self.key_threshold,
            value_threshold: self.value_threshold,
            budget: BudgetOptions {
                min_ratio: self.min_ratio,
                rule: if self.strict_paper { EndpointRule::Printed } else { EndpointRule::Conserving },
                below_minimum: self.below_minimum,
            },
            mode: self.gqa_mode,
        }
    }

    /// Explicit setting, then `SPINDLEKV_WORKERS`, then available
    /// parallelism.
    pub fn resolved_workers(&self) -> Result<usize> {
        if let Some(n) = self.workers {
            return Ok(n);
        }
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(config_err(format!("{WORKERS_ENV}={v:?} is not a positive integer"))),
            },
            Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}
