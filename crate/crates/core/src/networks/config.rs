use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Serialized into checkpoints; two models
/// with equal configs have identically named and shaped parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub modality_count: usize,
    pub class_count: usize,
    /// Channels `C` of the anatomical representation.
    pub anat_channels: usize,
    /// Length `C_mod` of the modality vector.
    pub modality_dim: usize,
    /// Channels per encoder level; level 0 runs at full resolution and
    /// every later level halves the side.
    pub encoder_widths: Vec<usize>,
    pub patch_side: usize,
    /// `patch_side / d`; must equal `2^(levels - 1)`.
    pub downsample_factor: usize,
    #[serde(default = "default_convs")]
    pub convs_per_level: usize,
    #[serde(default = "default_convs")]
    pub decoder_convs_per_level: usize,
    #[serde(default = "default_modality_hidden")]
    pub modality_hidden: usize,
    #[serde(default = "default_temperature")]
    pub initial_temperature: f64,
}

fn default_convs() -> usize {
    2
}

fn default_modality_hidden() -> usize {
    16
}

fn default_temperature() -> f64 {
    10.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: `C = 8`, `d = patch_side / 4`.
    pub fn toy() -> Self {
        Self {
            modality_count: 4,
            class_count: 4,
            anat_channels: 8,
            modality_dim: 8,
            encoder_widths: vec![4, 8, 16],
            patch_side: 16,
            downsample_factor: 4,
            convs_per_level: 2,
            decoder_convs_per_level: 1,
            modality_hidden: 16,
            initial_temperature: 10.0,
        }
    }

    /// Brain-tumor scale: 112³ patches, `C = 32`, `d = patch_side / 8`.
    pub fn full_scale() -> Self {
        Self {
            anat_channels: 32,
            encoder_widths: vec![16, 32, 64, 128],
            patch_side: 112,
            downsample_factor: 8,
            ..Self::toy()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Side `d` of the anatomical representation.
    pub fn latent_side(&self) -> usize {
        self.patch_side / self.downsample_factor
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("modality_count", self.modality_count),
            ("anat_channels", self.anat_channels),
            ("modality_dim", self.modality_dim),
            ("patch_side", self.patch_side),
            ("downsample_factor", self.downsample_factor),
            ("convs_per_level", self.convs_per_level),
            ("decoder_convs_per_level", self.decoder_convs_per_level),
            ("modality_hidden", self.modality_hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count", "must be at least 2"));
        }
        if self.class_count > u8::MAX as usize + 1 {
            return Err(Error::config("class_count", "must fit in a u8 label"));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::config("encoder_widths", "needs at least one level, all widths positive"));
        }
        if self.patch_side % self.downsample_factor != 0 {
            return Err(Error::config("patch_side", "must be divisible by downsample_factor"));
        }
        if self.downsample_factor != 1 << (self.levels() - 1) {
            return Err(Error::config(
                "downsample_factor",
                format!("must equal 2^(levels-1) = {} for {} levels", 1usize << (self.levels() - 1), self.levels()),
            ));
        }
        if !(self.initial_temperature.is_finite() && self.initial_temperature > 0.0) {
            return Err(Error::config("initial_temperature", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Per-modality availability `δ`. Bit `j` of [`bits`](Self::bits) is
/// modality `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AvailabilityMask {
    delta: Vec<bool>,
}

impl AvailabilityMask {
    pub fn new(delta: Vec<bool>) -> Self {
        Self { delta }
    }

    pub fn all(m: usize) -> Self {
        Self { delta: vec![true; m] }
    }

    pub fn from_bits(m: usize, bits: u32) -> Self {
        Self {
            delta: (0..m).map(|j| bits >> j & 1 == 1).collect(),
        }
    }

    pub fn bits(&self) -> u32 {
        self.delta.iter().enumerate().map(|(j, &d)| (d as u32) << j).sum()
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn is_available(&self, j: usize) -> bool {
        self.delta[j]
    }

    pub fn count(&self) -> usize {
        self.delta.iter().filter(|&&d| d).count()
    }

    pub fn is_full(&self) -> bool {
        self.delta.iter().all(|&d| d)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.delta
    }

    /// Errors unless at least one modality is available.
    pub fn check_nonempty(&self) -> Result<()> {
        if self.count() == 0 {
            Err(Error::NoAvailableModalities)
        } else {
            Ok(())
        }
    }
}
