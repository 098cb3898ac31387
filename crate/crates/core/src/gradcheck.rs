//! Central finite-difference verification of every analytic loss gradient.
//!
//! Inputs are small seeded random tensors (`C = 2`, `d = 3`, `N = 2`,
//! `M = 2`). For each loss the maximum relative error over all input
//! coordinates, including the temperature where present, is reported.

use ndarray::{Array, Array1, Array3, Array4, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::losses::{
    anatomical_contrastive_loss, anatomical_contrastive_loss_grad, inverse_frequency_weights,
    modality_contrastive_loss, modality_contrastive_loss_grad, reconstruction_loss, reconstruction_loss_grad,
    soft_dice_loss, soft_dice_loss_grad, ssim_channel_mean, ssim_channel_mean_grad, weighted_cross_entropy,
    weighted_cross_entropy_grad, ContrastiveConfig, FeatureMap, ModalityVector, PairBatch, DEFAULT_C1, DEFAULT_C2,
};

/// A loss passes when its maximum relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

const CHANNELS: usize = 2;
const SIDE: usize = 3;
const SAMPLES: usize = 2;
const MODALITIES: usize = 2;
const MODALITY_DIM: usize = 4;
const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    pub temperature: f64,
    /// Fault injection: when set, analytic gradients use this SSIM `c1`
    /// while the finite differences keep the default.
    pub analytic_ssim_c1: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-6,
            floor: 1e-6,
            temperature: 10.0,
            analytic_ssim_c1: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: &'static str,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Loss names in report order.
pub const GRADCHECK_LOSSES: [&str; 6] = ["ana", "ssim", "mod", "rec", "wce", "dice"];

fn max_rel_error<F>(x: &[f64], analytic: &[f64], cfg: &GradcheckConfig, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + cfg.step;
        let up = f(&probe)?;
        probe[i] = x[i] - cfg.step;
        let down = f(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * cfg.step);
        let denom = analytic[i].abs().max(numeric.abs()).max(cfg.floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

fn normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn maps_from(flat: &[f64], count: usize) -> Vec<FeatureMap> {
    let len = CHANNELS * SIDE.pow(3);
    (0..count)
        .map(|i| {
            Array::from_shape_vec((CHANNELS, SIDE, SIDE, SIDE), flat[i * len..(i + 1) * len].to_vec())
                .expect("map length")
        })
        .collect()
}

fn grid<R: Clone>(items: &[R]) -> Vec<Vec<R>> {
    items.chunks(MODALITIES).map(|c| c.to_vec()).collect()
}

fn check_ana(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let n = SAMPLES * MODALITIES;
    let mut x = normal(rng, n * CHANNELS * SIDE.pow(3));
    x.push(cfg.temperature);
    let loss_at = |x: &[f64], c1: f64| -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: x[x.len() - 1],
            ssim_c1: c1,
            ..ContrastiveConfig::default()
        }
    };
    let batch_of = |x: &[f64]| PairBatch::from_grid(grid(&maps_from(x, n)));
    let g = anatomical_contrastive_loss_grad(
        &batch_of(&x)?,
        &loss_at(&x, cfg.analytic_ssim_c1.unwrap_or(DEFAULT_C1)),
    )?;
    let mut analytic: Vec<f64> = g.rep_grads.iter().flat_map(|m| m.iter().copied()).collect();
    analytic.push(g.d_temperature);
    let err = max_rel_error(&x, &analytic, cfg, |x| {
        anatomical_contrastive_loss(&batch_of(x)?, &loss_at(x, DEFAULT_C1))
    })?;
    Ok(GradcheckRow {
        loss: "ana",
        max_rel_error: err,
        coordinates: x.len(),
    })
}

fn check_ssim(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let x = normal(rng, 2 * CHANNELS * SIDE.pow(3));
    let maps = maps_from(&x, 2);
    let c1 = cfg.analytic_ssim_c1.unwrap_or(DEFAULT_C1);
    let (_, ga, gb) = ssim_channel_mean_grad(maps[0].view(), maps[1].view(), c1, DEFAULT_C2)?;
    let analytic: Vec<f64> = ga.iter().chain(gb.iter()).copied().collect();
    let err = max_rel_error(&x, &analytic, cfg, |x| {
        let m = maps_from(x, 2);
        ssim_channel_mean(m[0].view(), m[1].view(), DEFAULT_C1, DEFAULT_C2)
    })?;
    Ok(GradcheckRow {
        loss: "ssim",
        max_rel_error: err,
        coordinates: x.len(),
    })
}

fn check_mod(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let n = SAMPLES * MODALITIES;
    let mut x = normal(rng, n * MODALITY_DIM);
    x.push(cfg.temperature);
    let batch_of = |x: &[f64]| {
        let vecs: Vec<ModalityVector> = x[..n * MODALITY_DIM]
            .chunks(MODALITY_DIM)
            .map(|c| Array1::from(c.to_vec()))
            .collect();
        PairBatch::from_grid(grid(&vecs))
    };
    let cc = |x: &[f64]| ContrastiveConfig::with_temperature(x[x.len() - 1]);
    let g = modality_contrastive_loss_grad(&batch_of(&x)?, &cc(&x))?;
    let mut analytic: Vec<f64> = g.rep_grads.iter().flat_map(|v| v.iter().copied()).collect();
    analytic.push(g.d_temperature);
    let err = max_rel_error(&x, &analytic, cfg, |x| modality_contrastive_loss(&batch_of(x)?, &cc(x)))?;
    Ok(GradcheckRow {
        loss: "mod",
        max_rel_error: err,
        coordinates: x.len(),
    })
}

fn check_rec(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let len = SIDE.pow(3);
    let targets: Vec<Array3<f64>> = (0..MODALITIES)
        .map(|_| Array::from_shape_vec((SIDE, SIDE, SIDE), normal(rng, len)).expect("volume"))
        .collect();
    // Offsets of at least 0.1 keep every coordinate far from the |r - x| kink.
    let x: Vec<f64> = targets
        .iter()
        .flat_map(|t| t.iter().copied())
        .map(|t| {
            let off: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                t + off
            } else {
                t - off
            }
        })
        .collect();
    let recons_of = |x: &[f64]| -> Vec<Array3<f64>> {
        x.chunks(len)
            .map(|c| Array::from_shape_vec((SIDE, SIDE, SIDE), c.to_vec()).expect("volume"))
            .collect()
    };
    let r = recons_of(&x);
    let (_, grads) = reconstruction_loss_grad(&views(&r), &views(&targets))?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let err = max_rel_error(&x, &analytic, cfg, |x| {
        reconstruction_loss(&views(&recons_of(x)), &views(&targets))
    })?;
    Ok(GradcheckRow {
        loss: "rec",
        max_rel_error: err,
        coordinates: x.len(),
    })
}

fn views(v: &[Array3<f64>]) -> Vec<ArrayView3<'_, f64>> {
    v.iter().map(|a| a.view()).collect()
}

fn seg_inputs(rng: &mut ChaCha8Rng) -> (Vec<f64>, Array3<u8>) {
    let labels = Array3::from_shape_fn((SIDE, SIDE, SIDE), |_| rng.gen_range(0..CLASSES as u8));
    (normal(rng, CLASSES * SIDE.pow(3)), labels)
}

fn logits_of(x: &[f64]) -> Array4<f64> {
    Array::from_shape_vec((CLASSES, SIDE, SIDE, SIDE), x.to_vec()).expect("logit length")
}

fn check_wce(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let (x, labels) = seg_inputs(rng);
    let weights = inverse_frequency_weights([labels.view()], CLASSES)?;
    let (_, g) = weighted_cross_entropy_grad(logits_of(&x).view(), labels.view(), &weights)?;
    let analytic: Vec<f64> = g.iter().copied().collect();
    let err = max_rel_error(&x, &analytic, cfg, |x| {
        weighted_cross_entropy(logits_of(x).view(), labels.view(), &weights)
    })?;
    Ok(GradcheckRow {
        loss: "wce",
        max_rel_error: err,
        coordinates: x.len(),
    })
}

fn check_dice(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let (x, labels) = seg_inputs(rng);
    let (_, g) = soft_dice_loss_grad(logits_of(&x).view(), labels.view())?;
    let analytic: Vec<f64> = g.iter().copied().collect();
    let err = max_rel_error(&x, &analytic, cfg, |x| soft_dice_loss(logits_of(x).view(), labels.view()))?;
    Ok(GradcheckRow {
        loss: "dice",
        max_rel_error: err,
        coordinates: x.len(),
    })
}

/// Runs all six checks, in [`GRADCHECK_LOSSES`] order. Each check draws from
/// its own seeded stream.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    type Check = fn(&GradcheckConfig, &mut ChaCha8Rng) -> Result<GradcheckRow>;
    let checks: [Check; 6] = [check_ana, check_ssim, check_mod, check_rec, check_wce, check_dice];
    checks
        .iter()
        .enumerate()
        .map(|(i, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            check(cfg, &mut rng)
        })
        .collect()
}

/// Fixed-width table with one line per loss.
pub fn format_gradcheck(rows: &[GradcheckRow]) -> String {
    let mut out = format!("{:<6} {:>14} {:>6}  {}\n", "loss", "max_rel_error", "coords", "status");
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:>14.3e} {:>6}  {}\n",
            r.loss,
            r.max_rel_error,
            r.coordinates,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
