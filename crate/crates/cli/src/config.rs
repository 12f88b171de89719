//! Resolved run configuration: a JSON file merged with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skullstrip_core::data::{GenerateConfig, Normalization};
use skullstrip_core::model::ModelConfig;
use skullstrip_core::nn::StrategyKind;
use skullstrip_core::training::TrainConfig;

use crate::{CliError, CliResult};

/// File name of the provenance copy written next to every command's output.
pub const PROVENANCE_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    /// Dataset manifest.
    pub data: Option<PathBuf>,
    pub normalization: Normalization,
    pub out: Option<PathBuf>,
    /// Strategies trained by `compare`, in table order.
    pub strategies: Vec<StrategyKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            data: None,
            normalization: Normalization::default(),
            out: None,
            strategies: StrategyKind::ALL.to_vec(),
        }
    }
}

/// Flags shared by every subcommand. Anything set here wins over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategies: Vec<StrategyKind>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))
    }

    /// File values (or defaults) with the flags applied on top.
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> CliResult<Self> {
        let mut cfg = match file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = o.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
            cfg.generate.seed = seed;
        }
        if let Some(&first) = o.strategies.first() {
            cfg.model.strategy = first;
            cfg.strategies = o.strategies.clone();
        }
        if o.data.is_some() {
            cfg.data = o.data.clone();
        }
        if o.out.is_some() {
            cfg.out = o.out.clone();
        }
        Ok(cfg)
    }

    pub fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    pub fn manifest(&self) -> CliResult<&Path> {
        self.data.as_deref().ok_or_else(|| CliError::usage("no dataset given; pass --data <manifest.json>"))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.strategies.is_empty() {
            return Err(CliError::new("config", "strategies must not be empty"));
        }
        let mut seen = self.strategies.clone();
        seen.sort_by_key(|s| s.key());
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return Err(CliError::new("config", "strategies lists a strategy twice"));
        }
        Ok(())
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_provenance(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(PROVENANCE_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::new("format", e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epochs": 7, "seed": 1}, "model": {"seed": 1, "depth": 2}}"#).unwrap();
        let o = Overrides { seed: Some(9), strategies: vec![StrategyKind::Pre], ..Default::default() };
        let cfg = RunConfig::resolve(Some(&path), &o).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.model.depth, 2);
        assert_eq!((cfg.train.seed, cfg.model.seed, cfg.generate.seed), (9, 9, 9));
        assert_eq!(cfg.model.strategy, StrategyKind::Pre);
        assert_eq!(cfg.strategies, vec![StrategyKind::Pre]);

        let plain = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(plain.train.seed, 1);
        assert_eq!(plain.strategies.len(), 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"trian": {}}"#).unwrap();
        let err = RunConfig::resolve(Some(&path), &Overrides::default()).unwrap_err();
        assert_eq!(err.category, "config");
    }

    #[test]
    fn provenance_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { data: Some("d/manifest.json".into()), ..Default::default() };
        cfg.write_provenance(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(PROVENANCE_FILE)).unwrap(), cfg);
    }
}
