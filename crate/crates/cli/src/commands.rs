use std::fs;
use std::path::{Path, PathBuf};

use dcseg::data::{generate_phantom_dataset, modality_names, modality_suffixes, split_by_subject, PhantomSpec};
use dcseg::evaluation::{alignment_metrics, evaluate_all_subsets, evaluate_subsets, export_representations, RegionSpec};
use dcseg::gradcheck::{format_gradcheck, run_gradcheck, GradcheckConfig};
use dcseg::networks::{ensure_same_config, load_checkpoint, AvailabilityMask};
use dcseg::training::{run_training, LossTerm, FINAL_CHECKPOINT};

use crate::config::{load_dir, RunConfig};
use crate::CliError;

/// Effective config written next to the training outputs.
pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(dcseg::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn generate(config: &Path, out: &Path, count: Option<usize>, seed: Option<u64>) -> Result<(), CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::config("--config", format!("{}: {e}", config.display())))?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Parse(e.message().to_string()))?;
    let (mut spec, default_count) = if table.contains_key("dataset") {
        let run = RunConfig::from_toml(&text)?;
        let source = run
            .dataset
            .phantom
            .ok_or_else(|| CliError::config("dataset.phantom", "generate needs a phantom source"))?;
        (source.spec, Some(source.count))
    } else {
        let spec: PhantomSpec = toml::from_str(&text).map_err(|e| CliError::Parse(e.message().to_string()))?;
        spec.validate().map_err(|e| CliError::in_section("spec", e))?;
        (spec, None)
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let count = count
        .or(default_count)
        .ok_or_else(|| CliError::config("--count", "required with a bare phantom spec"))?;
    let manifest = generate_phantom_dataset(out, &spec, count)?;
    println!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
    Ok(())
}

pub fn train(config: &Path, ablate: &[&str], seed: Option<u64>, out: Option<PathBuf>, resume: bool) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    for name in ablate {
        let term = LossTerm::parse(name).ok_or_else(|| CliError::config("--ablate", format!("unknown term `{name}`")))?;
        cfg.train.loss_switches = cfg.train.loss_switches.without(term);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    let subjects = cfg.load_subjects()?;
    let subjects = if cfg.dataset.eval_fraction > 0.0 {
        split_by_subject(subjects, cfg.dataset.eval_fraction).0
    } else {
        subjects
    };
    if subjects.is_empty() {
        return Err(CliError::config("dataset.eval_fraction", "no subjects left for training"));
    }
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join(RUN_CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io_err(&cfg_path, e))?;
    let outputs = run_training(&subjects, &cfg.model, &cfg.train, &cfg.augmentation, &cfg.out_dir, resume)?;
    println!(
        "trained {} steps over {} epochs on {} subjects ({}); checkpoint {}",
        outputs.steps,
        outputs.epochs,
        subjects.len(),
        cfg.train.loss_switches.label(),
        outputs.final_checkpoint.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub subset: Option<String>,
}

/// Parses `FLAIR,T1` against the modality names or file suffixes, ignoring case.
pub fn parse_subset(text: &str, m: usize) -> Result<AvailabilityMask, CliError> {
    let (names, suffixes) = (modality_names(m), modality_suffixes(m));
    let mut bits = vec![false; m];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let j = (0..m)
            .find(|&j| names[j].eq_ignore_ascii_case(part) || suffixes[j].eq_ignore_ascii_case(part))
            .ok_or_else(|| CliError::config("--subset", format!("unknown modality `{part}`; known: {}", names.join(","))))?;
        bits[j] = true;
    }
    if !bits.contains(&true) {
        return Err(CliError::config("--subset", "names no modality"));
    }
    Ok(AvailabilityMask::new(bits))
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let cfg = args.config.as_deref().map(RunConfig::load).transpose()?;
    let out_dir = cfg.as_ref().map(|c| c.out_dir.clone());
    let checkpoint = args
        .checkpoint
        .or_else(|| out_dir.as_ref().map(|d| d.join(FINAL_CHECKPOINT)))
        .ok_or_else(|| CliError::config("--checkpoint", "required without --config"))?;
    let report_dir = args
        .out
        .or_else(|| out_dir.as_ref().map(|d| d.join("eval")))
        .ok_or_else(|| CliError::config("--out", "required without --config"))?;

    let ckpt = load_checkpoint(&checkpoint)?;
    let model = ckpt.model;
    if let Some(cfg) = &cfg {
        ensure_same_config(model.config(), &cfg.model)?;
    }
    let m = model.config().modality_count;

    let subjects = match (&args.dataset, &cfg) {
        (Some(dir), _) => load_dir(dir, "--dataset")?,
        (None, Some(cfg)) => {
            let all = cfg.load_subjects()?;
            let held_out = if cfg.dataset.eval_fraction > 0.0 {
                split_by_subject(all, cfg.dataset.eval_fraction).1
            } else {
                all
            };
            if held_out.is_empty() {
                return Err(CliError::config("dataset.eval_fraction", "no subjects held out for evaluation"));
            }
            held_out
        }
        (None, None) => return Err(CliError::config("--dataset", "required without --config")),
    };
    if let Some(s) = subjects.iter().find(|s| s.modality_count() != m) {
        return Err(CliError::config(
            "dataset",
            format!("subject {} has {} modalities, checkpoint expects {m}", s.subject_id, s.modality_count()),
        ));
    }

    let regions = RegionSpec::defaults(model.config().class_count);
    let report = match &args.subset {
        Some(text) => evaluate_subsets(&model, &subjects, &regions, vec![parse_subset(text, m)?])?,
        None => evaluate_all_subsets(&model, &subjects, &regions)?,
    };
    report.write(&report_dir)?;
    let records = export_representations(&model, &subjects, &report_dir.join(EMBEDDINGS_FILE))?;
    print!("{}", report.to_markdown());
    if subjects.len() > 1 && m > 1 {
        let a = alignment_metrics(&records)?;
        println!(
            "anatomical SSIM intra {:.4} inter {:.4}; modality cosine intra {:.4} inter {:.4}",
            a.intra_subject_ssim, a.inter_subject_ssim, a.intra_modality_cosine, a.inter_modality_cosine
        );
    }
    println!("reports written to {}", report_dir.display());
    Ok(())
}

pub fn gradcheck(seed: u64, fault_ssim_c1: Option<f64>) -> Result<(), CliError> {
    let rows = run_gradcheck(&GradcheckConfig {
        seed,
        analytic_ssim_c1: fault_ssim_c1,
        ..GradcheckConfig::default()
    })?;
    print!("{}", format_gradcheck(&rows));
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.loss).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_parse_names_and_suffixes() {
        assert_eq!(parse_subset("FLAIR,T1", 4).unwrap().bits(), 0b0011);
        assert_eq!(parse_subset("t1ce, t2", 4).unwrap().bits(), 0b1100);
        assert_eq!(parse_subset("m2", 3).unwrap().bits(), 0b010);
        assert!(matches!(parse_subset("PD", 4), Err(CliError::Config { field, .. }) if field == "--subset"));
        assert!(parse_subset(",", 4).is_err());
    }
}
