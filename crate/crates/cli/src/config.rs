//! Declarative run configuration read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dcseg::data::{generate_phantom, load_dataset, AugmentationConfig, MultimodalVolume, PhantomSpec};
use dcseg::networks::ModelConfig;
use dcseg::par;
use dcseg::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub dataset: DatasetConfig,
}

/// Exactly one of `path` and `phantom` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Share of subjects held out for evaluation, chosen by subject-id hash.
    /// Zero evaluates on every subject.
    pub eval_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSource>,
}

/// Phantoms generated in memory with seeds `spec.seed .. spec.seed + count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSource {
    pub count: usize,
    pub spec: PhantomSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::in_section("model", e))?;
        self.train.validate().map_err(|e| CliError::in_section("train", e))?;
        self.augmentation
            .validate()
            .map_err(|e| CliError::in_section("augmentation", e))?;
        let d = &self.dataset;
        if !(0.0..=1.0).contains(&d.eval_fraction) {
            return Err(CliError::config("dataset.eval_fraction", "must lie in [0, 1]"));
        }
        match (&d.path, &d.phantom) {
            (Some(_), Some(_)) => Err(CliError::config("dataset", "set either `path` or `phantom`, not both")),
            (None, None) => Err(CliError::config("dataset", "needs `path` or `phantom`")),
            (None, Some(p)) => p.spec.validate().map_err(|e| CliError::in_section("dataset.phantom.spec", e)),
            (Some(_), None) => Ok(()),
        }
    }

    /// Loads or generates every subject of the configured source.
    pub fn load_subjects(&self) -> Result<Vec<MultimodalVolume>, CliError> {
        match (&self.dataset.path, &self.dataset.phantom) {
            (Some(path), _) => load_dir(path, "dataset.path"),
            (None, Some(p)) => {
                let subjects = par::map_range(p.count, |i| generate_phantom(&p.spec.with_seed(p.spec.seed + i as u64)));
                Ok(subjects.into_iter().collect::<Result<Vec<_>, _>>()?)
            }
            (None, None) => Err(CliError::config("dataset", "needs `path` or `phantom`")),
        }
    }
}

/// Loads a dataset directory, reporting a missing directory against `field`.
pub fn load_dir(path: &Path, field: &str) -> Result<Vec<MultimodalVolume>, CliError> {
    if !path.is_dir() {
        return Err(CliError::config(field, format!("{} is not a directory", path.display())));
    }
    let subjects = load_dataset(path)?;
    if subjects.is_empty() {
        return Err(CliError::config(field, format!("{} contains no subjects", path.display())));
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phantom_config() -> RunConfig {
        RunConfig {
            out_dir: "runs/x".into(),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            augmentation: AugmentationConfig::default(),
            dataset: DatasetConfig {
                eval_fraction: 0.25,
                path: None,
                phantom: Some(PhantomSource {
                    count: 4,
                    spec: PhantomSpec::new(16, 4, 4, 3),
                }),
            },
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = phantom_config();
        cfg.train.grad_clip = None;
        cfg.train.steps_per_epoch = Some(20);
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn shipped_configs_parse_and_round_trip() {
        for name in ["toy.toml", "full_scale.toml"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
            let cfg = RunConfig::load(&path).unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn shipped_configs_state_every_field() {
        // Parsing with defaults filled in and re-serializing adds no key.
        for name in ["toy.toml", "full_scale.toml"] {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
            let text = fs::read_to_string(&path).unwrap();
            let written: toml::Table = text.parse().unwrap();
            let full: toml::Table = RunConfig::from_toml(&text).unwrap().to_toml().parse().unwrap();
            assert_eq!(count_keys(&written), count_keys(&full), "{name}");
        }
    }

    fn count_keys(t: &toml::Table) -> usize {
        t.values()
            .map(|v| match v {
                toml::Value::Table(inner) => 1 + count_keys(inner),
                toml::Value::Array(items) => {
                    1 + items
                        .iter()
                        .map(|i| if let toml::Value::Table(t) = i { count_keys(t) } else { 0 })
                        .sum::<usize>()
                }
                _ => 1,
            })
            .sum()
    }

    #[test]
    fn exactly_one_dataset_source() {
        let mut cfg = phantom_config();
        cfg.dataset.path = Some("data".into());
        assert!(matches!(cfg.validate(), Err(CliError::Config { field, .. }) if field == "dataset"));
        cfg.dataset.phantom = None;
        cfg.validate().unwrap();
        cfg.dataset.path = None;
        assert!(matches!(cfg.validate(), Err(CliError::Config { field, .. }) if field == "dataset"));
    }

    #[test]
    fn invalid_sub_config_names_section_and_field() {
        let mut cfg = phantom_config();
        cfg.train.batch_size = 0;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, CliError::Config { field, .. } if field == "train.batch_size"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = phantom_config().to_toml().replace("eval_fraction", "eval_share");
        assert!(matches!(RunConfig::from_toml(&text), Err(CliError::Parse(m)) if m.contains("eval_share")));
    }
}
