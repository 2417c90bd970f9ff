//! Global TOML configuration. Every section and field is optional; the
//! defaults are the reference hyperparameters.

use std::path::Path;

use mmg_core::{BuildConfig, InjectionConfig, PprConfig};
use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::distill::DistillConfig;
use crate::eval::EvalConfig;
use crate::providers::ProviderConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub provider: ProviderConfig,
    pub ppr: PprConfig,
    pub injection: InjectionConfig,
    pub agent: AgentConfig,
    pub distill: DistillConfig,
    pub build: BuildConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

impl Config {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: name.clone(), source })?;
        Self::from_toml(&text, &name)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.provider.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.ppr;
        if !(0.0..1.0).contains(&p.damping) || !(0.0..=1.0).contains(&p.alpha) || !(0.0..=1.0).contains(&p.gamma) {
            return Err(ConfigError::Invalid("ppr: damping must lie in [0, 1), alpha and gamma in [0, 1]".into()));
        }
        if p.tol <= 0.0 || p.max_iter == 0 {
            return Err(ConfigError::Invalid("ppr: tol and max_iter must be positive".into()));
        }
        if self.agent.max_rounds == 0 {
            return Err(ConfigError::Invalid("agent: max_rounds must be positive".into()));
        }
        if self.eval.bootstrap_resamples == 0 || !(0.0..1.0).contains(&self.eval.level) || self.eval.level <= 0.0 {
            return Err(ConfigError::Invalid("eval: resamples must be positive and level in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_defaults() {
        let cfg = Config::from_toml("", "mem").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.ppr.damping, 0.85);
        assert_eq!(cfg.ppr.quotas.total, 16);
        assert_eq!(cfg.agent.max_rounds, 5);
        assert_eq!(cfg.agent.error_budget, 5);
        assert_eq!(cfg.injection.max_chains, 3);
        assert_eq!(cfg.provider.text_dim, 2560);
        assert_eq!(cfg.provider.visual_dim, 3584);
    }

    #[test]
    fn partial_sections_override() {
        let cfg = Config::from_toml("[ppr]\ngamma = 0.0\n[agent]\nanswer_mode = \"open\"\n", "mem").unwrap();
        assert_eq!(cfg.ppr.gamma, 0.0);
        assert_eq!(cfg.ppr.damping, 0.85);
        assert_eq!(cfg.agent.answer_mode, crate::agent::AnswerMode::Open);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(matches!(Config::from_toml("[ppr]\ndamping = 1.5\n", "mem"), Err(ConfigError::Invalid(_))));
        assert!(matches!(Config::from_toml("[nope]\n", "mem"), Err(ConfigError::Parse { .. })));
        assert!(matches!(Config::from_toml("[provider]\ntext_dim = 0\n", "mem"), Err(ConfigError::Invalid(_))));
    }
}
