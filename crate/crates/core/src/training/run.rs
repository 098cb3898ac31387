//! The checkpointed, resumable training loop.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::{LossSwitches, TrainConfig};
use super::step::{train_step, StepReport, TrainBatch, TrainState};
use crate::data::{augment_with_rng, AugmentationConfig, MultimodalVolume};
use crate::error::{Error, Result};
use crate::networks::{ensure_same_config, load_checkpoint, save_checkpoint, DcSegModel, ModelConfig};
use crate::params::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,epoch,l_seg,l_reg,l_ana,l_mod,l_rec,total,t_value";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const CHECKPOINT_DIR: &str = "checkpoints";

/// Serialized alongside the model in every training checkpoint.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    step: u64,
    epoch: usize,
    rng: ChaCha8Rng,
    optimizer: Adam,
    train_config: TrainConfig,
    augmentation: AugmentationConfig,
}

/// Where a run left its artifacts, and the trained model.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub model: DcSegModel,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: u64,
    pub epochs: usize,
}

/// Checkpoint path for the end of `epoch`.
pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:05}.ckpt"))
}

/// Most recent epoch checkpoint under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = out_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned());
        if name.is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt")) {
            found.push(path);
        }
    }
    found.sort();
    Ok(found.pop())
}

/// The initial state of a run: model and sampling streams derive from
/// `cfg.seed` on separate ChaCha streams.
pub fn initial_state(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Ok(TrainState {
        model: DcSegModel::new(model_cfg.clone(), cfg.seed)?,
        optimizer: Adam::default(),
        rng,
        step: 0,
        epoch: 0,
    })
}

fn save_state(path: &Path, state: &TrainState, cfg: &TrainConfig, aug: &AugmentationConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let params = state.model.params();
    let mut extras = Vec::new();
    for (id, name, _) in params.iter() {
        if let Some((m, v)) = state.optimizer.moments(id) {
            extras.push((format!("adam.m/{name}"), m));
            extras.push((format!("adam.v/{name}"), v));
        }
    }
    let extras: Vec<(String, &Tensor)> = extras;
    let snapshot = Snapshot {
        step: state.step,
        epoch: state.epoch,
        rng: state.rng.clone(),
        optimizer: state.optimizer.clone(),
        train_config: cfg.clone(),
        augmentation: aug.clone(),
    };
    save_checkpoint(path, &state.model, &extras, Some(serde_json::to_value(snapshot)?))
}

/// Restores a training state, checking that it was produced by the same
/// configuration. Only `epochs` may differ.
pub fn load_state(
    path: &Path,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
) -> Result<TrainState> {
    let ckpt = load_checkpoint(path)?;
    ensure_same_config(ckpt.model.config(), model_cfg)?;
    let snapshot = ckpt
        .state
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
    let snapshot: Snapshot =
        serde_json::from_value(snapshot).map_err(|e| Error::Checkpoint(format!("bad training state: {e}")))?;
    let stored = TrainConfig {
        epochs: cfg.epochs,
        ..snapshot.train_config.clone()
    };
    ensure_same_config(&stored, cfg)?;
    ensure_same_config(&snapshot.augmentation, aug)?;

    let mut optimizer = snapshot.optimizer;
    let n = ckpt.model.params().len();
    for (id, name, _) in ckpt.model.params().iter() {
        if let (Some(m), Some(v)) = (ckpt.extra(&format!("adam.m/{name}")), ckpt.extra(&format!("adam.v/{name}"))) {
            optimizer.set_moments(id, m.clone(), v.clone(), n);
        }
    }
    Ok(TrainState {
        model: ckpt.model,
        optimizer,
        rng: snapshot.rng,
        step: snapshot.step,
        epoch: snapshot.epoch,
    })
}

/// Stacks augmented crops into a complete-modality batch.
fn assemble_batch(items: &[MultimodalVolume]) -> TrainBatch {
    let m = items[0].modality_count();
    let inputs = (0..m)
        .map(|j| {
            let views: Vec<_> = items.iter().map(|s| s.volumes[j].view().insert_axis(Axis(0))).collect();
            ndarray::stack(Axis(0), &views).expect("equal crop shapes").into_dyn()
        })
        .collect::<Vec<Tensor>>();
    TrainBatch {
        inputs,
        labels: items.iter().map(|s| s.label.clone()).collect(),
    }
}

fn metrics_row(r: &StepReport, epoch: usize) -> String {
    let p = r.parts;
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.step, epoch, p.seg, p.reg, p.ana, p.modality, p.rec, r.total, r.temperature
    )
}

/// Keeps the header and every row with `step <= last_step`.
fn truncate_metrics(path: &Path, last_step: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= last_step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn validate_run(dataset: &[MultimodalVolume], model_cfg: &ModelConfig, cfg: &TrainConfig, aug: &AugmentationConfig) -> Result<()> {
    model_cfg.validate()?;
    cfg.validate()?;
    aug.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("dataset", "training needs at least one subject"));
    }
    if cfg.patch_side != model_cfg.patch_side {
        return Err(Error::config("patch_side", "training and model patch sides differ"));
    }
    if aug.crop_size != model_cfg.patch_side {
        return Err(Error::config("crop_size", "augmentation crop must equal the model patch side"));
    }
    if let Some(s) = dataset.iter().find(|s| s.modality_count() != model_cfg.modality_count) {
        return Err(Error::config(
            "modality_count",
            format!("subject {} has {} modalities", s.subject_id, s.modality_count()),
        ));
    }
    if let Some(s) = dataset.iter().find(|s| s.max_class() > model_cfg.class_count) {
        return Err(Error::config(
            "class_count",
            format!("subject {} has labels outside 0..{}", s.subject_id, model_cfg.class_count),
        ));
    }
    Ok(())
}

/// Trains on `dataset`, writing `metrics.csv`, epoch checkpoints and
/// `final.ckpt` under `out_dir`.
///
/// With `resume`, continues from the latest epoch checkpoint in `out_dir`;
/// metrics rows written after that checkpoint are discarded first. Each
/// epoch draws a fresh subject permutation, and every batch item is an
/// augmented crop of the next subject in it.
pub fn run_training(
    dataset: &[MultimodalVolume],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<RunOutputs> {
    validate_run(dataset, model_cfg, cfg, aug)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics = out_dir.join(METRICS_FILE);

    let resumed = if resume { latest_checkpoint(out_dir)? } else { None };
    let mut state = match &resumed {
        Some(path) => {
            let state = load_state(path, model_cfg, cfg, aug)?;
            truncate_metrics(&metrics, state.step)?;
            log::info!("resuming from {} at epoch {}", path.display(), state.epoch);
            state
        }
        None => {
            fs::write(&metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics, e))?;
            let state = initial_state(model_cfg, cfg)?;
            save_state(&checkpoint_path(out_dir, 0), &state, cfg, aug)?;
            state
        }
    };

    let n = dataset.len();
    let b = cfg.batch_size;
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(n.div_ceil(b));
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut log_file = OpenOptions::new()
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;

    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let mut rows = String::new();
        let mut last = None;
        for k in 0..steps_per_epoch {
            let items = (0..b)
                .map(|i| augment_with_rng(&dataset[order[(k * b + i) % n]], aug, &mut state.rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = assemble_batch(&items);
            let lr = cfg.learning_rate_at(state.step, total_steps);
            let report = train_step(&mut state, &batch, cfg, lr)?;
            rows.push_str(&metrics_row(&report, epoch));
            rows.push('\n');
            last = Some(report);
        }
        log_file
            .write_all(rows.as_bytes())
            .map_err(|e| Error::io(&metrics, e))?;
        state.epoch = epoch;
        if let Some(r) = last {
            log::info!("epoch {epoch}: step {} total {:.4} t {:.3}", r.step, r.total, r.temperature);
        }
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            save_state(&checkpoint_path(out_dir, epoch), &state, cfg, aug)?;
        }
    }
    log_file.flush().map_err(|e| Error::io(&metrics, e))?;

    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_state(&final_checkpoint, &state, cfg, aug)?;
    Ok(RunOutputs {
        model: state.model,
        final_checkpoint,
        metrics,
        steps: state.step,
        epochs: state.epoch,
    })
}

/// Runs every variant of [`LossSwitches::ablation_matrix`] into
/// `out_dir/<label>`.
pub fn run_ablation_matrix(
    dataset: &[MultimodalVolume],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    out_dir: &Path,
) -> Result<Vec<(LossSwitches, RunOutputs)>> {
    LossSwitches::ablation_matrix()
        .into_iter()
        .map(|switches| {
            let variant = TrainConfig {
                loss_switches: switches,
                ..cfg.clone()
            };
            let outputs = run_training(dataset, model_cfg, &variant, aug, &out_dir.join(switches.label()), false)?;
            Ok((switches, outputs))
        })
        .collect()
}
