//! Run configuration loaded from TOML.
//!
//! Sections mirror the modules: `[model]`, `[spec]`, `[scheduler]`, `[kv]`,
//! `[cost]`, `[workload]` and `[sim]`. Unknown keys anywhere are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostModelParams;
use crate::engine::SpecParams;
use crate::error::{config_err, Result};
use crate::kv_manager::KvConfig;
use crate::numerics::{ModelConfig, Token};
use crate::scheduler::{PipelineMode, Policy};
use crate::sim::{SimConfig, WorkloadSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub k: usize,
    pub s: f64,
    /// Acceptance rate assumed by cost-level runs.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub eos: Option<Token>,
}

fn default_alpha() -> f64 {
    6.16 / 8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerSection {
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_mode")]
    pub mode: PipelineMode,
    #[serde(default = "default_max_batch")]
    pub max_batch: usize,
}

fn default_policy() -> Policy {
    Policy::Unified
}

fn default_mode() -> PipelineMode {
    PipelineMode::Delayed
}

fn default_max_batch() -> usize {
    256
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self {
            policy: default_policy(),
            mode: default_mode(),
            max_batch: default_max_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    /// Host scheduling work per iteration.
    #[serde(default)]
    pub cpu_ms: f64,
    /// Seeds the sampled acceptance of cost-level runs and token-level prompts.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u64,
}

fn default_max_iterations() -> u64 {
    10_000_000
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            cpu_ms: 0.0,
            seed: 0,
            max_iterations: default_max_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Toy model for token-level runs; `ModelConfig::tiny(0)` when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub spec: SpecSection,
    #[serde(default)]
    pub scheduler: SchedulerSection,
    pub kv: KvConfig,
    #[serde(default)]
    pub cost: CostModelParams,
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub sim: SimSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.spec_params().validate()?;
        self.workload.validate()?;
        self.sim_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().unwrap_or_else(|| ModelConfig::tiny(0))
    }

    pub fn spec_params(&self) -> SpecParams {
        SpecParams {
            k: self.spec.k,
            sparsity: self.spec.s,
            eos: self.spec.eos,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        let mut c = SimConfig::new(self.spec.k, self.spec.s, self.spec.alpha, self.kv.clone(), self.cost);
        c.policy = self.scheduler.policy;
        c.mode = self.scheduler.mode;
        c.max_batch = self.scheduler.max_batch;
        c.cpu_ms = self.sim.cpu_ms;
        c.seed = self.sim.seed;
        c.max_iterations = self.sim.max_iterations;
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }
}
