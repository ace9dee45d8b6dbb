//! Experiment configuration files (TOML or JSON) and their canonical hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trustgossip_core::model::{ModelConfig, PretrainConfig, TrainingConfig};
use trustgossip_core::protocol::{DataConfig, ExperimentConfig, RoundSchedule, Strategy, Topology};

use crate::error::{AppError, Result};

/// Everything a run needs: the experiment itself, how its data is built and
/// how the shared base is pretrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory name under the output root; derived from the config
    /// hash when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    /// One strategy, or several run over the same data and base.
    pub strategies: Vec<Strategy>,
    pub topology: Topology,
    pub n_clients: usize,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub schedule: RoundSchedule,
    pub ft_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        RunConfig {
            run_id: None,
            strategies: vec![e.strategy],
            topology: e.topology,
            n_clients: e.n_clients,
            seeds: e.seeds,
            model: e.model,
            training: e.training,
            schedule: e.schedule,
            ft_fraction: e.ft_fraction,
            top_k: e.top_k,
            temperature: e.temperature,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

/// Accepts either `strategy = "x"` or `strategies = ["x", "y"]`.
#[derive(Deserialize)]
#[serde(untagged)]
enum StrategyField {
    One(Strategy),
    Many(Vec<Strategy>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigFormat {
    Toml,
    Json,
}

impl ConfigFormat {
    pub fn from_path(path: &Path) -> Option<ConfigFormat> {
        match path.extension()?.to_str()? {
            "toml" => Some(ConfigFormat::Toml),
            "json" => Some(ConfigFormat::Json),
            _ => None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let format = ConfigFormat::from_path(path)
            .ok_or_else(|| AppError::config(path, "expected a .toml or .json file"))?;
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let config = Self::parse(&text, format).map_err(|m| AppError::config(path, m))?;
        config.validate().map_err(|e| AppError::config(path, e.to_string()))?;
        Ok(config)
    }

    /// Parses without validating. Errors are human-readable messages.
    pub fn parse(text: &str, format: ConfigFormat) -> std::result::Result<RunConfig, String> {
        let mut value: serde_json::Value = match format {
            ConfigFormat::Toml => toml::from_str(text).map_err(|e| e.to_string())?,
            ConfigFormat::Json => serde_json::from_str(text).map_err(|e| e.to_string())?,
        };
        if let Some(map) = value.as_object_mut() {
            if let Some(one) = map.remove("strategy") {
                if map.contains_key("strategies") {
                    return Err("give either `strategy` or `strategies`, not both".into());
                }
                let field: StrategyField = serde_json::from_value(one).map_err(|e| format!("strategy: {e}"))?;
                let list = match field {
                    StrategyField::One(s) => vec![s],
                    StrategyField::Many(v) => v,
                };
                map.insert("strategies".into(), serde_json::to_value(list).map_err(|e| e.to_string())?);
            }
        }
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> trustgossip_core::Result<()> {
        use trustgossip_core::Error;
        if self.strategies.is_empty() {
            return Err(Error::InvalidConfig("no strategy given".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::InvalidConfig(format!("strategy {} listed twice", s.name())));
            }
        }
        if self.data.corpus.vocab_size != self.model.vocab {
            return Err(Error::InvalidConfig(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                self.data.corpus.vocab_size, self.model.vocab
            )));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
                return Err(Error::InvalidConfig(format!("run id {id:?} is not a plain directory name")));
            }
        }
        trustgossip_core::corpus::CategorySpec::family(&self.data.corpus)?;
        for &s in &self.strategies {
            self.experiment(s).validate()?;
        }
        Ok(())
    }

    pub fn experiment(&self, strategy: Strategy) -> ExperimentConfig {
        ExperimentConfig {
            strategy,
            topology: self.topology.clone(),
            n_clients: self.n_clients,
            seeds: self.seeds.clone(),
            model: self.model.clone(),
            training: self.training,
            schedule: self.schedule,
            ft_fraction: self.ft_fraction,
            top_k: self.top_k,
            temperature: self.temperature,
        }
    }

    /// JSON with sorted keys and every default filled in, without the run id.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            map.remove("run_id");
        }
        // serde_json's default map is ordered by key, so this is canonical.
        serde_json::to_string(&value).expect("value serialises")
    }

    /// SHA-256 of [`RunConfig::canonical_json`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn run_id(&self) -> String {
        match &self.run_id {
            Some(id) => id.clone(),
            None => {
                let names: Vec<&str> = self.strategies.iter().map(|s| s.name()).collect();
                format!(
                    "{}-{}-{}-{}",
                    names.join("+"),
                    self.data.heterogeneity.as_str(),
                    self.topology.name(),
                    &self.hash()[..10]
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order_and_format() {
        let a = r#"
strategy = "strategy3"
seeds = [4, 5]
[schedule]
comm_period = 25
total_iterations = 200
"#;
        let b = r#"
seeds = [4, 5]
[schedule]
total_iterations = 200
comm_period = 25
[model]
vocab = 512
"#;
        let b = format!("strategy = \"strategy3\"\n{b}");
        let j = r#"{"schedule": {"total_iterations": 200, "comm_period": 25}, "seeds": [4, 5], "strategies": ["strategy3"]}"#;
        let ca = RunConfig::parse(a, ConfigFormat::Toml).unwrap();
        let cb = RunConfig::parse(&b, ConfigFormat::Toml).unwrap();
        let cj = RunConfig::parse(j, ConfigFormat::Json).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        assert_eq!(ca.hash(), cj.hash());
        let mut other = ca.clone();
        other.seeds = vec![5, 4];
        assert_ne!(ca.hash(), other.hash());
    }

    #[test]
    fn run_id_does_not_change_the_hash() {
        let mut c = RunConfig::default();
        let h = c.hash();
        c.run_id = Some("named".into());
        assert_eq!(c.hash(), h);
        assert_eq!(c.run_id(), "named");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("stratgy = \"local\"", ConfigFormat::Toml).is_err());
        assert!(RunConfig::parse("[schedule]\nperiod = 3", ConfigFormat::Toml).is_err());
        assert!(RunConfig::parse("strategy = \"nope\"", ConfigFormat::Toml).is_err());
        assert!(RunConfig::parse("strategy = \"local\"\nstrategies = [\"local\"]", ConfigFormat::Toml).is_err());
    }

    #[test]
    fn strategy_lists_and_topologies_parse() {
        let c = RunConfig::parse(
            "strategies = [\"local\", \"fedavg\"]\ntopology = \"ring\"\ntop_k = 8",
            ConfigFormat::Toml,
        )
        .unwrap();
        assert_eq!(c.strategies, vec![Strategy::Local, Strategy::Fedavg]);
        assert_eq!(c.topology, Topology::Ring);
        assert_eq!(c.top_k, Some(8));
        c.validate().unwrap();
    }

    #[test]
    fn validation_catches_semantic_errors() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.model.vocab = 256;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.strategies = vec![Strategy::Local, Strategy::Local];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.run_id = Some("../escape".into());
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.schedule.comm_period = 0;
        assert!(c.validate().is_err());
    }
}
