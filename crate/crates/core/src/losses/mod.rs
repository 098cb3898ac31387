//! Differentiable loss and similarity primitives.
//!
//! Everything here is a pure function in double precision. Each loss comes in
//! a value-only form and a `_grad` form returning analytic gradients, which
//! the training graph uses as cached local derivatives.

mod contrastive;
mod reconstruction;
mod segmentation;
mod ssim;

pub use contrastive::{
    anatomical_contrastive_loss, anatomical_contrastive_loss_grad, cosine_similarity,
    modality_contrastive_loss, modality_contrastive_loss_grad, pair_indicator, ContrastiveConfig,
    ContrastiveGrad, FeatureMap, ModalityVector, PairBatch, PairItem,
};
pub use reconstruction::{reconstruction_loss, reconstruction_loss_grad};
pub use segmentation::{
    inverse_frequency_weights, soft_dice_loss, soft_dice_loss_grad, softmax_classes,
    weighted_cross_entropy, weighted_cross_entropy_grad, LabelVolume, SegLogits, DICE_EPS,
    WEIGHT_CLIP,
};
pub use ssim::{ssim_channel_mean, ssim_channel_mean_grad, DEFAULT_C1, DEFAULT_C2};

use serde::{Deserialize, Serialize};

/// Scalar loss components of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub reg: f64,
    pub ana: f64,
    pub modality: f64,
    pub rec: f64,
}

impl LossParts {
    /// `ana + mod + rec`.
    pub fn disentangle(&self) -> f64 {
        self.ana + self.modality + self.rec
    }

    pub fn total(&self, alpha: f64) -> f64 {
        total_loss(self.seg, self.reg, self.disentangle(), alpha)
    }
}

/// `seg + reg + alpha · disentangle`.
pub fn total_loss(seg: f64, reg: f64, disentangle: f64, alpha: f64) -> f64 {
    seg + reg + alpha * disentangle
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(1.0, 1.0, 1.0, 0.4) - 2.4).abs() < 1e-15);
        assert_eq!(total_loss(0.3, 0.7, 0.0, 5.0), 1.0);
        assert_eq!(total_loss(0.0, 0.0, 3.0, 0.0), 0.0);
        let parts = LossParts { seg: 1.0, reg: 1.0, ana: 0.5, modality: 0.25, rec: 0.25 };
        assert!((parts.total(0.4) - 2.4).abs() < 1e-15);
    }
}
