use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which disentanglement and regularization terms enter the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub ana: bool,
    #[serde(rename = "mod")]
    pub modality: bool,
    pub rec: bool,
    pub reg: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self::ALL
    }
}

/// One switchable loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Ana,
    Mod,
    Rec,
    Reg,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::Ana, LossTerm::Mod, LossTerm::Rec, LossTerm::Reg];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ana => "ana",
            LossTerm::Mod => "mod",
            LossTerm::Rec => "rec",
            LossTerm::Reg => "reg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

impl LossSwitches {
    pub const ALL: LossSwitches = LossSwitches {
        ana: true,
        modality: true,
        rec: true,
        reg: true,
    };

    pub fn without(mut self, term: LossTerm) -> Self {
        match term {
            LossTerm::Ana => self.ana = false,
            LossTerm::Mod => self.modality = false,
            LossTerm::Rec => self.rec = false,
            LossTerm::Reg => self.reg = false,
        }
        self
    }

    pub fn is_enabled(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::Ana => self.ana,
            LossTerm::Mod => self.modality,
            LossTerm::Rec => self.rec,
            LossTerm::Reg => self.reg,
        }
    }

    /// Short label such as `full`, `-rec` or `-ana-mod`.
    pub fn label(&self) -> String {
        let off: Vec<&str> = LossTerm::ALL
            .into_iter()
            .filter(|&t| !self.is_enabled(t))
            .map(LossTerm::name)
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            off.iter().map(|n| format!("-{n}")).collect()
        }
    }

    /// The six ablation variants: the full model, both contrastive terms
    /// off, and each single term off.
    pub fn ablation_matrix() -> Vec<LossSwitches> {
        let full = Self::ALL;
        vec![
            full,
            full.without(LossTerm::Ana).without(LossTerm::Mod),
            full.without(LossTerm::Ana),
            full.without(LossTerm::Mod),
            full.without(LossTerm::Rec),
            full.without(LossTerm::Reg),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Bernoulli keep probability `p` of each modality in fusion.
    pub dropout_keep_prob: f64,
    pub loss_switches: LossSwitches,
    pub seed: u64,
    pub patch_side: usize,
    /// Global gradient-norm clip; `None` disables clipping and is written
    /// as `0.0`.
    #[serde(default = "default_clip", with = "clip_serde")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_true")]
    pub learnable_temperature: bool,
    /// Cosine learning-rate decay over all steps.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Checkpoint every this many epochs (and always at the end).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training
    /// subjects.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

fn default_clip() -> Option<f64> {
    Some(5.0)
}

mod clip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

fn default_true() -> bool {
    true
}

fn default_checkpoint_every() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            learning_rate: 2e-4,
            epochs: 500,
            batch_size: 2,
            dropout_keep_prob: 0.5,
            loss_switches: LossSwitches::ALL,
            seed: 0,
            patch_side: 112,
            grad_clip: default_clip(),
            learnable_temperature: true,
            cosine_decay: false,
            checkpoint_every: default_checkpoint_every(),
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be non-negative"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.dropout_keep_prob > 0.0 && self.dropout_keep_prob <= 1.0) {
            return Err(Error::config("dropout_keep_prob", "must lie in (0, 1]"));
        }
        if self.patch_side == 0 {
            return Err(Error::config("patch_side", "must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch", "must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total` steps.
    pub fn learning_rate_at(&self, step: u64, total: u64) -> f64 {
        if !self.cosine_decay || total == 0 {
            return self.learning_rate;
        }
        let progress = (step as f64 / total as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().alpha, 0.4);
        assert_eq!(TrainConfig::default().learning_rate, 2e-4);
    }

    #[test]
    fn ablation_labels() {
        let labels: Vec<String> = LossSwitches::ablation_matrix().iter().map(|s| s.label()).collect();
        assert_eq!(labels, ["full", "-ana-mod", "-ana", "-mod", "-rec", "-reg"]);
        assert_eq!(LossTerm::parse("rec"), Some(LossTerm::Rec));
        assert_eq!(LossTerm::parse("seg"), None);
    }

    #[test]
    fn invalid_values_name_their_field() {
        let cfg = TrainConfig {
            dropout_keep_prob: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "dropout_keep_prob"));
    }

    #[test]
    fn disabled_clip_round_trips() {
        let cfg = TrainConfig {
            grad_clip: None,
            ..TrainConfig::default()
        };
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"grad_clip\":0.0"));
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            cosine_decay: true,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0, 100), cfg.learning_rate);
        assert!(cfg.learning_rate_at(100, 100).abs() < 1e-12);
    }
}
