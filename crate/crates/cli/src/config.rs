//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use ctxner::aggregation::{Decider, TieBreak};
use ctxner::corpus::{Delimiter, Encoding};
use ctxner::{RemoteConfig, WindowConfig, WindowStrategy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::UsageError;

/// End-to-end method: how windows are built and how predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStrategy {
    Single,
    First,
    CmvVote,
    CmvSum,
}

impl RunStrategy {
    pub const ALL: [RunStrategy; 4] = [RunStrategy::Single, RunStrategy::First, RunStrategy::CmvVote, RunStrategy::CmvSum];

    pub fn name(self) -> &'static str {
        match self {
            RunStrategy::Single => "single",
            RunStrategy::First => "first",
            RunStrategy::CmvVote => "cmv-vote",
            RunStrategy::CmvSum => "cmv-sum",
        }
    }

    /// Windows the strategy reads; multi-context strategies use the configured layout.
    pub fn windows(self, configured: WindowStrategy) -> WindowStrategy {
        match self {
            RunStrategy::Single => WindowStrategy::Single,
            _ => configured,
        }
    }

    pub fn decider(self, tie: TieBreak) -> Decider {
        match self {
            RunStrategy::Single | RunStrategy::First => Decider::First,
            RunStrategy::CmvVote => Decider::LabelVote(tie),
            RunStrategy::CmvSum => Decider::SoftmaxSum,
        }
    }

    pub fn is_cmv(self) -> bool {
        matches!(self, RunStrategy::CmvVote | RunStrategy::CmvSum)
    }
}

impl fmt::Display for RunStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for RunStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RunStrategy::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown strategy `{s}` (expected single, first, cmv-vote or cmv-sum)"))
    }
}

/// Combining contexts only makes sense when a token is seen in several windows.
pub fn check_strategy(strategy: RunStrategy, windows: WindowStrategy) -> Result<(), UsageError> {
    if strategy.is_cmv() && windows == WindowStrategy::Single {
        return Err(UsageError("CMV requires multi-context windows".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub encoding: Encoding,
    #[serde(default)]
    pub delimiter: Delimiter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBackendConfig {
    pub gazetteer: PathBuf,
    #[serde(default = "default_bonus")]
    pub context_bonus: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_outside")]
    pub outside_logit: f64,
}

fn default_bonus() -> f64 {
    1.5
}

fn default_outside() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock(MockBackendConfig),
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    /// Cells fine-tuned at once.
    pub parallelism: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            learning_rates: vec![2e-5, 3e-5, 5e-5],
            batch_sizes: vec![2, 4, 8, 16],
            epochs: vec![1, 2, 3, 4],
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub vocab: PathBuf,
    pub backend: BackendConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<RunStrategy>,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub eval_split: EvalSplit,
    /// Entity types of the label set; defaults to the types seen in the data.
    #[serde(default)]
    pub types: Option<Vec<String>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_strategies() -> Vec<RunStrategy> {
    RunStrategy::ALL.to_vec()
}

fn default_repetitions() -> usize {
    5
}

impl ExperimentConfig {
    /// Parse, resolve relative paths against `base` and validate.
    pub fn from_toml(text: &str, base: &Path) -> anyhow::Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        ExperimentConfig::from_toml(&text, base).with_context(|| format!("loading {}", path.display()))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.vocab);
        fix(&mut self.data.dev);
        self.data.train.as_mut().map(fix);
        self.data.test.as_mut().map(fix);
        if let BackendConfig::Mock(m) = &mut self.backend {
            fix(&mut m.gazetteer);
        }
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        self.window.validate().map_err(|e| UsageError(e.to_string()))?;
        let mut paths = vec![&self.vocab, &self.data.dev];
        paths.extend(self.data.train.iter());
        paths.extend(self.data.test.iter());
        if let BackendConfig::Mock(m) = &self.backend {
            paths.push(&m.gazetteer);
        }
        if let Some(missing) = paths.into_iter().find(|p| !p.exists()) {
            return bad(format!("path does not exist: {}", missing.display()));
        }
        if self.eval_split == EvalSplit::Test && self.data.test.is_none() {
            return bad("eval_split = \"test\" needs data.test".into());
        }
        let g = &self.grid;
        if g.learning_rates.is_empty() || g.batch_sizes.is_empty() || g.epochs.is_empty() {
            return bad("grid lists must not be empty".into());
        }
        if g.epochs.contains(&0) || g.batch_sizes.contains(&0) || g.parallelism == 0 {
            return bad("grid epochs, batch sizes and parallelism must be at least 1".into());
        }
        if g.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return bad("grid learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn eval_path(&self) -> &Path {
        match self.eval_split {
            EvalSplit::Dev => &self.data.dev,
            EvalSplit::Test => self.data.test.as_deref().expect("validated"),
        }
    }

    /// SHA-256 over the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
