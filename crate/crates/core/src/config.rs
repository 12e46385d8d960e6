//! Run configuration: a single TOML file covering environment, agent
//! architecture, training, and evaluation, with strict unknown-key
//! rejection. Every run writes its fully resolved configuration next to its
//! outputs so it can be re-launched from that file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::grid::EnvConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Evaluation settings for the `eval`/`sweep` subcommands.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: u64,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            alphas: vec![0.0, 0.2, 0.4, 0.6],
            betas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seed: 1,
        }
    }
}

/// Output locations.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig { out_dir: PathBuf::from("runs/latest") }
    }
}

/// Full run configuration.
#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the environment geometry into the agent configuration so the
    /// two cannot drift apart, then checks all component invariants.
    pub fn resolve(mut self) -> Result<RunConfig, ConfigError> {
        self.env = self
            .env
            .resolve_density()
            .map_err(|e| ConfigError::Invalid(format!("env: {e}")))?;
        self.agent.fov_side = self.env.fov_side;
        self.agent.grid_side = self.env.grid_side;
        self.agent.agents = self.env.agents;
        self.env.validate().map_err(|e| ConfigError::Invalid(format!("env: {e}")))?;
        if self.agent.vocab == 0 {
            return Err(ConfigError::Invalid("agent.vocab must be positive".into()));
        }
        if self.agent.vocab > u16::MAX as usize {
            return Err(ConfigError::Invalid(format!(
                "agent.vocab {} exceeds the symbol range",
                self.agent.vocab
            )));
        }
        if self.agent.tau <= 0.0 {
            return Err(ConfigError::Invalid("agent.tau must be positive".into()));
        }
        if self.train.workers == 0 {
            return Err(ConfigError::Invalid("train.workers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.train.gamma) {
            return Err(ConfigError::Invalid(format!(
                "train.gamma {} outside [0, 1)",
                self.train.gamma
            )));
        }
        for (name, value) in [
            ("train.value_coef", self.train.value_coef),
            ("train.entropy_coef", self.train.entropy_coef),
            ("train.size_coef", self.train.size_coef),
        ] {
            if value < 0.0 {
                return Err(ConfigError::Invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, list) in [("eval.alphas", &self.eval.alphas), ("eval.betas", &self.eval.betas)] {
            for &v in list {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ConfigError::Invalid(format!("{name} entry {v} outside [0, 1]")));
                }
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::EncoderVariant;

    #[test]
    fn defaults_match_paper_scale() {
        let config = RunConfig::default().resolve().unwrap();
        assert_eq!(config.env.grid_side, 15);
        assert_eq!(config.env.fov_side, 8);
        assert_eq!(config.env.agents, 2);
        assert_eq!(config.env.obstacle_count, 25);
        assert_eq!(config.env.max_steps, 1024);
        assert_eq!(config.agent.vocab, 1024);
        assert_eq!(config.agent.gin_iterations, 5);
        assert_eq!(config.train.gamma, 0.99);
        assert_eq!(config.train.adam.lr, 1e-4);
        assert_eq!(config.train.adam.beta1, 0.9);
        assert_eq!(config.train.adam.beta2, 0.999);
        assert_eq!(config.train.adam.eps, 1e-8);
        assert_eq!(config.eval.episodes, 100);
    }

    #[test]
    fn toml_round_trip() {
        let mut config = RunConfig::default();
        config.agent.variant = EncoderVariant::Level2Tree;
        config.train.total_episodes = 123;
        let text = config.to_toml_string();
        let back = RunConfig::from_toml_str(&text, Path::new("mem")).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = RunConfig::from_toml_str(
            "[env]\ngrid_side = 9\nnot_a_key = 1\n",
            Path::new("bad.toml"),
        )
        .unwrap_err();
        let message = err.to_string();
        assert!(message.contains("bad.toml"));
        assert!(message.contains("not_a_key"), "{message}");

        assert!(RunConfig::from_toml_str("[train.adam]\nlr = 0.01\nwat = 2\n", Path::new("x"))
            .is_err());
    }

    #[test]
    fn geometry_is_reconciled_and_validated() {
        let mut config = RunConfig::default();
        config.env.fov_side = 4;
        config.env.grid_side = 9;
        config.agent.fov_side = 8; // stale; overwritten by resolve
        let resolved = config.resolve().unwrap();
        assert_eq!(resolved.agent.fov_side, 4);
        assert_eq!(resolved.agent.grid_side, 9);

        let mut bad = RunConfig::default();
        bad.env.fov_side = 6; // not a power of two
        assert!(bad.resolve().is_err());

        let mut bad = RunConfig::default();
        bad.train.gamma = 1.0;
        assert!(bad.resolve().is_err());

        let mut bad = RunConfig::default();
        bad.eval.alphas = vec![0.0, 1.2];
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn density_overrides_obstacle_count() {
        let mut config = RunConfig::default();
        config.env.obstacle_density = Some(0.15);
        let resolved = config.resolve().unwrap();
        // ⌊0.15 · 225⌋ on the default 15×15 grid.
        assert_eq!(resolved.env.obstacle_count, 33);

        let mut bad = RunConfig::default();
        bad.env.obstacle_density = Some(1.5);
        assert!(bad.resolve().is_err());
    }
}
