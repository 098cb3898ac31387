//! Loss assembly and one optimizer step.

use ndarray::{Array3, Array4, ArrayView4, Axis, Ix1, Ix4, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::{LossSwitches, TrainConfig};
use super::sampling::sample_availability;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    anatomical_contrastive_loss_grad, inverse_frequency_weights, modality_contrastive_loss_grad,
    reconstruction_loss_grad, soft_dice_loss_grad, weighted_cross_entropy_grad, ContrastiveConfig, LossParts,
    PairBatch,
};
use crate::networks::{AvailabilityMask, Branches, DcSegModel};
use crate::par;
use crate::params::Tensor;

/// Complete-modality training patches: `inputs[j]` is `(B, 1, s, s, s)` and
/// `labels[b]` is `(s, s, s)`.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<Array3<u8>>,
}

impl TrainBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Everything a training run mutates.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DcSegModel,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub parts: LossParts,
    pub total: f64,
    pub temperature: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Handles of the assembled loss graph.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    pub parts: LossParts,
}

fn to_f64_item(t: &Tensor, b: usize) -> Array4<f64> {
    t.index_axis(Axis(0), b)
        .mapv(|v| v as f64)
        .into_dimensionality::<Ix4>()
        .expect("rank-5 tensor")
}

fn stack_items(items: Vec<Array4<f64>>, scale: f64) -> Tensor {
    let views: Vec<ArrayView4<f64>> = items.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views)
        .expect("equal item shapes")
        .mapv(|v| (v * scale) as f32)
        .into_dyn()
}

fn finite(t: &Tensor) -> bool {
    t.iter().all(|v| v.is_finite())
}

fn non_finite(component: &str, step: u64) -> Error {
    Error::NonFinite {
        component: component.into(),
        step,
    }
}

/// Mean over `label_of.len()` items of WCE + Dice, with `scale` applied to
/// the sum (so `scale = 1/B` over `M·B` items gives a per-sample mean of the
/// modality sum).
fn segmentation_term(
    logits: &Tensor,
    labels: &[Array3<u8>],
    label_of: impl Fn(usize) -> usize + Sync + Send,
    weights: &[f64],
    scale: f64,
) -> Result<(f64, Tensor)> {
    let n = logits.shape()[0];
    let per_item = par::map_range(n, |i| {
        let l = to_f64_item(logits, i);
        let y = labels[label_of(i)].view();
        let (wce, gw) = weighted_cross_entropy_grad(l.view(), y, weights)?;
        let (dice, gd) = soft_dice_loss_grad(l.view(), y)?;
        Ok::<_, Error>((wce + dice, gw + gd))
    });
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(n);
    for r in per_item {
        let (v, g) = r?;
        total += v;
        grads.push(g);
    }
    Ok((total * scale, stack_items(grads, scale)))
}

/// Builds the total loss on `tape` for fixed masks. Disabled terms add no
/// nodes. The returned parts hold exactly zero for disabled terms.
pub fn build_loss(
    model: &DcSegModel,
    tape: &mut Tape,
    batch: &TrainBatch,
    masks: &[AvailabilityMask],
    switches: LossSwitches,
    alpha: f64,
    learnable_temperature: bool,
    step: u64,
) -> Result<LossGraph> {
    let cfg = model.config();
    let (b, m) = (batch.batch_size(), cfg.modality_count);
    let branches = Branches {
        modality: switches.modality,
        reconstruction: switches.rec,
        separate: switches.reg,
    };
    let out = model.forward_training(tape, &batch.inputs, masks, branches)?;
    let weights = inverse_frequency_weights(batch.labels.iter().map(|l| l.view()), cfg.class_count)?;
    let inv_b = 1.0 / b as f64;
    let mut parts = LossParts::default();
    let mut terms: Vec<(Var, f32)> = Vec::new();

    let fused = tape.value(out.fused_logits);
    if !finite(fused) {
        return Err(non_finite("l_seg", step));
    }
    let (seg, g) = segmentation_term(fused, &batch.labels, |i| i, &weights, inv_b)?;
    parts.seg = seg;
    terms.push((tape.custom_scalar(seg as f32, vec![(out.fused_logits, g)]), 1.0));

    if let Some(sep) = out.sep_logits {
        let logits = tape.value(sep);
        if !finite(logits) {
            return Err(non_finite("l_reg", step));
        }
        let (reg, g) = segmentation_term(logits, &batch.labels, |i| i % b, &weights, inv_b)?;
        parts.reg = reg;
        terms.push((tape.custom_scalar(reg as f32, vec![(sep, g)]), 1.0));
    }

    let temperature = model.temperature();
    let ccfg = ContrastiveConfig::with_temperature(temperature);
    let log_t = model.log_temperature(tape);

    if switches.ana {
        if out.anat.iter().any(|&a| !finite(tape.value(a))) {
            return Err(non_finite("l_ana", step));
        }
        let grid: Vec<Vec<Array4<f64>>> = (0..b)
            .map(|i| out.anat.iter().map(|&a| to_f64_item(tape.value(a), i)).collect())
            .collect();
        let r = anatomical_contrastive_loss_grad(&PairBatch::from_grid(grid)?, &ccfg)?;
        parts.ana = r.loss;
        // Items are ordered sample-major: item i·M + j.
        let mut local: Vec<(Var, Tensor)> = (0..m)
            .map(|j| {
                let items = (0..b).map(|i| r.rep_grads[i * m + j].clone()).collect();
                (out.anat[j], stack_items(items, 1.0))
            })
            .collect();
        if learnable_temperature {
            local.push((log_t, Tensor::from_elem(IxDyn(&[1]), (r.d_temperature * temperature) as f32)));
        }
        terms.push((tape.custom_scalar(r.loss as f32, local), alpha as f32));
    }

    if switches.modality {
        let mods = out.modality.as_ref().expect("modality branch built");
        if mods.iter().any(|&v| !finite(tape.value(v))) {
            return Err(non_finite("l_mod", step));
        }
        let grid: Vec<Vec<_>> = (0..b)
            .map(|i| {
                mods.iter()
                    .map(|&v| {
                        tape.value(v)
                            .index_axis(Axis(0), i)
                            .mapv(|x| x as f64)
                            .into_dimensionality::<Ix1>()
                            .expect("(B, C_mod) tensor")
                    })
                    .collect()
            })
            .collect();
        let r = modality_contrastive_loss_grad(&PairBatch::from_grid(grid)?, &ccfg)?;
        parts.modality = r.loss;
        let mut local: Vec<(Var, Tensor)> = (0..m)
            .map(|j| {
                let rows: Vec<_> = (0..b).map(|i| r.rep_grads[i * m + j].view()).collect();
                let g = ndarray::stack(Axis(0), &rows).expect("equal lengths").mapv(|v| v as f32);
                (mods[j], g.into_dyn())
            })
            .collect();
        if learnable_temperature {
            local.push((log_t, Tensor::from_elem(IxDyn(&[1]), (r.d_temperature * temperature) as f32)));
        }
        terms.push((tape.custom_scalar(r.loss as f32, local), alpha as f32));
    }

    if let Some(recon) = &out.recon {
        if recon.iter().any(|&v| !finite(tape.value(v))) {
            return Err(non_finite("l_rec", step));
        }
        let as3 = |t: &Tensor, i: usize| {
            t.index_axis(Axis(0), i)
                .index_axis(Axis(0), 0)
                .mapv(|v| v as f64)
                .into_dimensionality::<ndarray::Ix3>()
                .expect("(B, 1, s, s, s) tensor")
        };
        let mut grads: Vec<Vec<Array3<f64>>> = vec![Vec::with_capacity(b); m];
        let mut total = 0.0;
        for i in 0..b {
            let r: Vec<Array3<f64>> = recon.iter().map(|&v| as3(tape.value(v), i)).collect();
            let x: Vec<Array3<f64>> = batch.inputs.iter().map(|t| as3(t, i)).collect();
            let rv: Vec<_> = r.iter().map(|a| a.view()).collect();
            let xv: Vec<_> = x.iter().map(|a| a.view()).collect();
            let (loss, g) = reconstruction_loss_grad(&rv, &xv)?;
            total += loss;
            for (j, gj) in g.into_iter().enumerate() {
                grads[j].push(gj);
            }
        }
        parts.rec = total * inv_b;
        let local = recon
            .iter()
            .zip(grads)
            .map(|(&v, gs)| {
                let items: Vec<Array4<f64>> = gs.into_iter().map(|g| g.insert_axis(Axis(0))).collect();
                (v, stack_items(items, inv_b))
            })
            .collect();
        terms.push((tape.custom_scalar(parts.rec as f32, local), alpha as f32));
    }

    for (name, v) in [
        ("l_seg", parts.seg),
        ("l_reg", parts.reg),
        ("l_ana", parts.ana),
        ("l_mod", parts.modality),
        ("l_rec", parts.rec),
    ] {
        if !v.is_finite() {
            return Err(non_finite(name, step));
        }
    }
    let total = tape.combine(&terms);
    Ok(LossGraph { total, parts })
}

/// Samples one availability mask per batch item, builds the loss, and
/// applies one Adam update.
pub fn train_step(state: &mut TrainState, batch: &TrainBatch, cfg: &TrainConfig, lr: f64) -> Result<StepReport> {
    let m = state.model.config().modality_count;
    let masks: Vec<AvailabilityMask> = (0..batch.batch_size())
        .map(|_| sample_availability(m, cfg.dropout_keep_prob, &mut state.rng))
        .collect();
    let step = state.step + 1;
    let temperature = state.model.temperature();
    let (parts, mut grads) = {
        let mut tape = Tape::new(state.model.params());
        let graph = build_loss(
            &state.model,
            &mut tape,
            batch,
            &masks,
            cfg.loss_switches,
            cfg.alpha,
            cfg.learnable_temperature,
            step,
        )?;
        (graph.parts, tape.backward(graph.total))
    };
    let total = parts.total(cfg.alpha);
    if !total.is_finite() {
        return Err(non_finite("total", step));
    }
    let grad_norm = grads.global_norm();
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient", step));
    }
    if let Some(clip) = cfg.grad_clip {
        if grad_norm > clip {
            grads.scale((clip / grad_norm) as f32);
        }
    }
    let frozen = if cfg.learnable_temperature {
        vec![]
    } else {
        vec![state.model.temperature_id()]
    };
    state.optimizer.step(state.model.params_mut(), &grads, lr, &frozen);
    state.step = step;
    Ok(StepReport {
        step,
        parts,
        total,
        temperature,
        grad_norm,
    })
}
