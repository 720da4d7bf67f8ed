//! The run configuration document and its validation.

use std::path::Path;

use agent_omit::env::{Difficulty, EnvKind};
use agent_omit::rl::TrainConfig;
use agent_omit::synthesis::SynthesisConfig;
use serde::{Deserialize, Serialize};

/// A configuration problem, reported with the dotted path of the field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.field.is_empty() {
            write!(f, "config error: {}", self.message)
        } else {
            write!(f, "config error in `{}`: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Which actor finishes the paired continuations during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Continuation {
    /// The terse scripted expert.
    Oracle,
    /// The fitted reference policy sampled at temperature 1.
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskCounts {
    pub train: usize,
    pub train_offset: u64,
    pub eval: usize,
    pub eval_offset: u64,
    pub rl: usize,
    pub rl_offset: u64,
    /// Tasks the reference policy is fitted on.
    pub reference: usize,
    pub reference_offset: u64,
}

impl Default for TaskCounts {
    fn default() -> Self {
        Self {
            train: 60,
            train_offset: 1000,
            eval: 50,
            eval_offset: 0,
            rl: 400,
            rl_offset: 2000,
            reference: 100,
            reference_offset: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

fn reference_fit() -> FitConfig {
    FitConfig { learning_rate: 1.0, epochs: 3000 }
}

fn sft_fit() -> FitConfig {
    FitConfig { learning_rate: 4.0, epochs: 20000 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub temperature: f64,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { mode: EvalMode::Sample, temperature: 1.0, seeds: vec![1, 2, 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Continuations per prefix.
    pub k: usize,
    pub tasks: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { k: 8, tasks: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    pub scales: Vec<f64>,
    pub rollouts: usize,
    pub seeds: Vec<u64>,
    pub tasks: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.0, 0.1, 0.2, 0.4, 0.8],
            rollouts: 8,
            seeds: vec![0, 1, 2, 3, 4],
            tasks: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvKind,
    pub difficulty: Difficulty,
    pub seed: u64,
    pub tasks: TaskCounts,
    pub continuation: Continuation,
    pub reference: FitConfig,
    pub synthesis: SynthesisConfig,
    pub sft: FitConfig,
    pub rl: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub theory: TheoryConfig,
    /// Default output directory when `--out` is not given.
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvKind::CraftWorld,
            difficulty: Difficulty::Easy,
            seed: 0,
            tasks: TaskCounts::default(),
            continuation: Continuation::Oracle,
            reference: reference_fit(),
            synthesis: SynthesisConfig { min_token_saving: 16, ..SynthesisConfig::default() },
            sft: sft_fit(),
            rl: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            theory: TheoryConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| err("", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Replace every seed knob with `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.rl.seed = seed;
        self.synthesis.seed = seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.tasks;
        for (name, n) in [("tasks.train", t.train), ("tasks.eval", t.eval), ("tasks.rl", t.rl), ("tasks.reference", t.reference)] {
            if n == 0 {
                return Err(err(name, "must be positive"));
            }
        }
        fit_ok("reference", &self.reference)?;
        fit_ok("sft", &self.sft)?;
        if self.synthesis.k == 0 {
            return Err(err("synthesis.k", "must be positive"));
        }
        self.rl.validate().map_err(|e| {
            let msg = e.to_string();
            let msg = msg.trim_start_matches("invalid training config: ");
            let field = msg.split_whitespace().next().unwrap_or("").trim_end_matches(',');
            err(&format!("rl.{field}"), msg.to_string())
        })?;
        if self.eval.seeds.is_empty() {
            return Err(err("eval.seeds", "must not be empty"));
        }
        if !(self.eval.temperature > 0.0) {
            return Err(err("eval.temperature", "must be positive"));
        }
        if self.analysis.k == 0 {
            return Err(err("analysis.k", "must be positive"));
        }
        if self.analysis.tasks == 0 {
            return Err(err("analysis.tasks", "must be positive"));
        }
        let th = &self.theory;
        if th.scales.is_empty() || th.scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(err("theory.scales", "must be a non-empty list of finite non-negative numbers"));
        }
        if th.rollouts == 0 {
            return Err(err("theory.rollouts", "must be positive"));
        }
        if th.seeds.is_empty() {
            return Err(err("theory.seeds", "must not be empty"));
        }
        if th.tasks == 0 {
            return Err(err("theory.tasks", "must be positive"));
        }
        Ok(())
    }
}

fn fit_ok(section: &str, fit: &FitConfig) -> Result<(), ConfigError> {
    if !(fit.learning_rate > 0.0 && fit.learning_rate.is_finite()) {
        return Err(err(&format!("{section}.learning_rate"), "must be positive and finite"));
    }
    if fit.epochs == 0 {
        return Err(err(&format!("{section}.epochs"), "must be positive"));
    }
    Ok(())
}
