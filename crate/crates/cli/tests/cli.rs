use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn dcseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("DCSEG_DEVICE")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn replace_once(text: &str, from: &str, to: &str) -> String {
    assert_eq!(text.matches(from).count(), 1, "`{from}` appears once in the toy config");
    text.replace(from, to)
}

/// The shipped toy config shrunk to 16³ phantoms and `epochs × 20` steps.
fn toy_config(dir: &Path, out_dir: &Path, epochs: usize) -> PathBuf {
    let toy = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")).unwrap();
    let mut text = replace_once(&toy, "out_dir = \"runs/toy\"", &format!("out_dir = {:?}", out_dir.to_str().unwrap()));
    text = replace_once(&text, "epochs = 100", &format!("epochs = {epochs}"));
    text = replace_once(&text, "grid_side = 32", "grid_side = 16");
    text = replace_once(&text, "lesion_radius = [3.0, 6.0]", "lesion_radius = [1.5, 3.0]");
    text = replace_once(&text, "count = 32", "count = 8");
    let path = dir.join(format!("toy_{epochs}.toml"));
    fs::write(&path, text).unwrap();
    path
}

struct TrainedRun {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out_dir: PathBuf,
    elapsed: Duration,
}

/// One 200-step toy training shared by the eval tests.
fn trained() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().join("run");
        let config = toy_config(dir.path(), &out_dir, 10);
        let start = Instant::now();
        let out = dcseg(&["train", "--config", config.to_str().unwrap()]);
        let elapsed = start.elapsed();
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        TrainedRun {
            _dir: dir,
            config,
            out_dir,
            elapsed,
        }
    })
}

#[test]
fn toy_training_runs_200_steps_within_ten_minutes() {
    let run = trained();
    assert!(run.elapsed < Duration::from_secs(600), "{:?}", run.elapsed);
    let metrics = fs::read_to_string(run.out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 201);
    assert!(metrics.lines().last().unwrap().starts_with("200,10,"));
    assert!(run.out_dir.join("final.ckpt").is_file());
    assert!(run.out_dir.join("run_config.toml").is_file());
}

#[test]
fn eval_reports_fifteen_rows_and_is_reproducible() {
    let run = trained();
    let (a, b) = (run.out_dir.join("eval_a"), run.out_dir.join("eval_b"));
    for dir in [&a, &b] {
        let out = dcseg(&["eval", "--config", run.config.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let csv = fs::read_to_string(a.join("subset_report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("flair,t1,t1c,t2,region,dice"));
    let subset_rows: Vec<&str> = lines.filter(|l| !l.starts_with('-')).collect();
    // 15 subsets × 3 regions.
    assert_eq!(subset_rows.len(), 45);
    assert!(subset_rows[0].starts_with("0,0,0,1,"));
    assert!(subset_rows[44].starts_with("1,1,1,1,"));
    let md = fs::read_to_string(a.join("subset_report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ●") || l.starts_with("| ○")).count(), 15);
    for file in ["subset_report.csv", "subset_report.md", "embeddings.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn eval_subset_override_reports_one_row() {
    let run = trained();
    let dir = run.out_dir.join("eval_subset");
    let out = dcseg(&[
        "eval",
        "--config",
        run.config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
        "--subset",
        "FLAIR,T1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("subset_report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).filter(|l| !l.starts_with('-')).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.starts_with("1,1,0,0,")));

    let out = dcseg(&["eval", "--config", run.config.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--subset", "PD"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--subset"));
}

#[test]
fn eval_rejects_corrupted_magic() {
    let run = trained();
    let bad = run.out_dir.join("bad_magic.ckpt");
    let mut bytes = fs::read(run.out_dir.join("final.ckpt")).unwrap();
    bytes[..5].copy_from_slice(b"XXXXX");
    fs::write(&bad, bytes).unwrap();
    let out = dcseg(&[
        "eval",
        "--config",
        run.config.to_str().unwrap(),
        "--checkpoint",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));
}

#[test]
fn eval_with_mismatched_model_names_the_field() {
    let run = trained();
    let text = fs::read_to_string(&run.config).unwrap();
    let other = run.out_dir.join("wider.toml");
    fs::write(&other, replace_once(&text, "anat_channels = 8", "anat_channels = 12")).unwrap();
    let ckpt = run.out_dir.join("final.ckpt");
    let out = dcseg(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("anat_channels"), "{}", stderr(&out));
}

#[test]
fn ablate_rec_zeroes_the_reconstruction_column() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), &dir.path().join("run"), 1);
    let out = dcseg(&["train", "--config", config.to_str().unwrap(), "--ablate", "rec", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("-rec"));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let rows: Vec<Vec<f64>> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r[6] == 0.0 && r[4] > 0.0));
    let saved = fs::read_to_string(dir.path().join("run/run_config.toml")).unwrap();
    assert!(saved.contains("rec = false") && saved.contains("seed = 3"));
}

#[test]
fn missing_dataset_path_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let toy = fs::read_to_string(toy_config(dir.path(), &dir.path().join("run"), 1)).unwrap();
    let start = toy.find("[dataset.phantom]").unwrap() - "# Subjects use seeds spec.seed .. spec.seed + count.\n".len();
    let text = format!("{}path = {:?}\n", &toy[..start], dir.path().join("absent").to_str().unwrap());
    let config = dir.path().join("real.toml");
    fs::write(&config, text).unwrap();
    let out = dcseg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("dataset.path"), "{}", stderr(&out));
}

#[test]
fn invalid_config_exits_2_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let toy = fs::read_to_string(toy_config(dir.path(), &dir.path().join("run"), 1)).unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, replace_once(&toy, "dropout_keep_prob = 0.5", "dropout_keep_prob = 1.5")).unwrap();
    let out = dcseg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.dropout_keep_prob"), "{}", stderr(&out));

    fs::write(&config, format!("{toy}\nstray = 1\n")).unwrap();
    let out = dcseg(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stray"), "{}", stderr(&out));

    let out = dcseg(&["train", "--config", dir.path().join("none.toml").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_device_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_dcseg"))
        .args(["gradcheck"])
        .env("DCSEG_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("DCSEG_DEVICE"));
    let out = Command::new(env!("CARGO_BIN_EXE_dcseg"))
        .args(["gradcheck"])
        .env("DCSEG_DEVICE", "cpu")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn gradcheck_lists_six_passing_losses() {
    let out = dcseg(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().filter(|l| l.ends_with("PASS") || l.ends_with("FAIL")).collect();
    assert_eq!(rows.len(), 6, "{text}");
    assert!(rows.iter().all(|r| r.ends_with("PASS")));
}

#[test]
fn perturbed_ssim_constant_fails_the_anatomical_loss() {
    let out = dcseg(&["gradcheck", "--fault-ssim-c1", "1e-3"]);
    assert_eq!(code(&out), 4);
    let text = stdout(&out);
    let failed: Vec<&str> = text
        .lines()
        .filter(|l| l.ends_with("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(failed, ["ana", "ssim"]);
}

#[test]
fn generate_writes_subjects_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config(dir.path(), &dir.path().join("run"), 1);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = dcseg(&["generate", "--config", config.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--count", "10"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let subjects: Vec<_> = fs::read_dir(&a).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().is_dir()).collect();
    assert_eq!(subjects.len(), 10);
    assert!(a.join("manifest.json").is_file());
    for entry in subjects {
        for file in fs::read_dir(entry.path()).unwrap() {
            let file = file.unwrap().path();
            let twin = b.join(file.strip_prefix(&a).unwrap());
            assert_eq!(fs::read(&file).unwrap(), fs::read(twin).unwrap(), "{}", file.display());
        }
    }

    let empty = dir.path().join("empty");
    let out = dcseg(&["generate", "--config", config.to_str().unwrap(), "--out", empty.to_str().unwrap(), "--count", "0"]);
    assert_eq!(code(&out), 0);
    let entries: Vec<_> = fs::read_dir(&empty).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, ["manifest.json"]);
}

#[test]
fn generated_dataset_evaluates_from_disk() {
    let run = trained();
    let data = run.out_dir.join("disk_data");
    let out = dcseg(&["generate", "--config", run.config.to_str().unwrap(), "--out", data.to_str().unwrap(), "--count", "2", "--seed", "500"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = run.out_dir.join("disk_eval");
    let ckpt = run.out_dir.join("final.ckpt");
    let out = dcseg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let embeddings = fs::read_to_string(report.join("embeddings.csv")).unwrap();
    assert!(embeddings.starts_with("subject_id,modality,kind,v0"));
    assert!(embeddings.lines().any(|l| l.starts_with("phantom_501,")));
}
