//! Exit-gate checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 4 to 7 train on the shipped toy config. The full-model seed-0
//! run is shared between them.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dcseg::data::{generate_phantom, AugmentationConfig, MultimodalVolume, PhantomSpec};
use dcseg::evaluation::{alignment_metrics, encode_representations, evaluate_all_subsets, RegionSpec, SubsetReport};
use dcseg::gradcheck::{run_gradcheck, GradcheckConfig};
use dcseg::losses::{anatomical_contrastive_loss, modality_contrastive_loss, ContrastiveConfig, PairBatch};
use dcseg::networks::{load_checkpoint, save_checkpoint, AvailabilityMask, DcSegModel, ModelConfig};
use dcseg::params::Tensor;
use dcseg::training::{mask_probability, run_training, sample_availability, LossSwitches, LossTerm, TrainConfig};

const GRADIENT_TOLERANCE: f64 = 1e-4;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOLERANCE: f64 = 1e-9;
const MASKING_TRIALS: usize = 100;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);
const FULL_DICE_MIN: f64 = 0.80;
const SINGLE_DICE_MIN: f64 = 0.50;
const MONOTONE_SLACK: f64 = 0.02;
const SSIM_GAP_MIN: f64 = 0.1;
const COSINE_GAP_MIN: f64 = 0.2;
const ABLATION_SLACK: f64 = 0.01;
const ABLATION_SEEDS: u64 = 3;
const MASK_DRAWS: usize = 1_000_000;
const MASK_SIGMAS: f64 = 3.0;

const TRAIN_SUBJECTS: std::ops::Range<u64> = 0..24;
const TEST_SUBJECTS: std::ops::Range<u64> = 1000..1016;

/// Four-modality report order as (FLAIR, T1, T1c, T2) presence.
const TABLE_ORDER: [[u8; 4]; 15] = [
    [0, 0, 0, 1],
    [0, 0, 1, 0],
    [0, 1, 0, 0],
    [1, 0, 0, 0],
    [0, 0, 1, 1],
    [0, 1, 1, 0],
    [1, 1, 0, 0],
    [0, 1, 0, 1],
    [1, 0, 0, 1],
    [1, 0, 1, 0],
    [1, 1, 1, 0],
    [1, 1, 0, 1],
    [1, 0, 1, 1],
    [0, 1, 1, 1],
    [1, 1, 1, 1],
];

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

struct ToySetup {
    model: ModelConfig,
    train: TrainConfig,
    augmentation: AugmentationConfig,
    spec: PhantomSpec,
}

fn toy_setup() -> ToySetup {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let table: toml::Table = fs::read_to_string(&path).unwrap().parse().unwrap();
    let section = |name: &str| table[name].clone();
    let spec = table["dataset"]["phantom"]["spec"].clone();
    ToySetup {
        model: section("model").try_into().unwrap(),
        train: section("train").try_into().unwrap(),
        augmentation: section("augmentation").try_into().unwrap(),
        spec: spec.try_into().unwrap(),
    }
}

fn phantoms(spec: &PhantomSpec, seeds: std::ops::Range<u64>) -> Vec<MultimodalVolume> {
    seeds.map(|s| generate_phantom(&spec.with_seed(s)).unwrap()).collect()
}

struct TrainedVariant {
    label: String,
    seed: u64,
    model: DcSegModel,
    report: SubsetReport,
    elapsed: Duration,
}

impl TrainedVariant {
    /// Mean over regions of the all-subset average Dice.
    fn score(&self) -> f64 {
        self.report.average.iter().sum::<f64>() / self.report.average.len() as f64
    }
}

struct Shared {
    setup: ToySetup,
    train: Vec<MultimodalVolume>,
    test: Vec<MultimodalVolume>,
    runs: Vec<TrainedVariant>,
}

impl Shared {
    fn new() -> Self {
        let setup = toy_setup();
        let train = phantoms(&setup.spec, TRAIN_SUBJECTS);
        let test = phantoms(&setup.spec, TEST_SUBJECTS);
        Self {
            setup,
            train,
            test,
            runs: Vec::new(),
        }
    }

    fn run(&mut self, switches: LossSwitches, seed: u64) -> &TrainedVariant {
        let label = switches.label();
        if let Some(i) = self.runs.iter().position(|r| r.label == label && r.seed == seed) {
            return &self.runs[i];
        }
        let cfg = TrainConfig {
            loss_switches: switches,
            seed,
            ..self.setup.train.clone()
        };
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = run_training(&self.train, &self.setup.model, &cfg, &self.setup.augmentation, dir.path(), false)
            .unwrap();
        let elapsed = start.elapsed();
        let report = evaluate_all_subsets(&out.model, &self.test, &RegionSpec::brats()).unwrap();
        self.runs.push(TrainedVariant {
            label,
            seed,
            model: out.model,
            report,
            elapsed,
        });
        self.runs.last().unwrap()
    }

    fn full(&mut self) -> &TrainedVariant {
        self.run(LossSwitches::ALL, 0)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let rows = run_gradcheck(&GradcheckConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let all = rows.len() == 6 && rows.iter().all(|r| r.max_rel_error < GRADIENT_TOLERANCE);
    let detail = rows
        .iter()
        .map(|r| format!("{} {:.1e}", r.loss, r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(
        all && elapsed < GRADIENT_BUDGET,
        format!("max rel err {worst:.2e} < {GRADIENT_TOLERANCE:e} [{detail}] in {:.1}s", elapsed.as_secs_f64()),
    )
}

/// Global per-channel SSIM written as plain loops.
fn scalar_ssim(a: &Array4<f64>, b: &Array4<f64>, c1: f64, c2: f64) -> f64 {
    let channels = a.shape()[0];
    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = a.index_axis(ndarray::Axis(0), c).iter().copied().collect();
        let y: Vec<f64> = b.index_axis(ndarray::Axis(0), c).iter().copied().collect();
        let n = x.len() as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for i in 0..x.len() {
            mx += x[i];
            my += y[i];
        }
        mx /= n;
        my /= n;
        let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
        for i in 0..x.len() {
            vx += (x[i] - mx) * (x[i] - mx);
            vy += (y[i] - my) * (y[i] - my);
            cxy += (x[i] - mx) * (y[i] - my);
        }
        vx /= n;
        vy /= n;
        cxy /= n;
        total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    total / channels as f64
}

/// Mean over all ordered pairs, self-pairs included, of
/// `ln(1 + exp(-sign · t · sim))`, where `sign` is +1 for pairs sharing `key`.
fn scalar_pair_loss<R>(items: &[(usize, usize, R)], key: impl Fn(&(usize, usize, R)) -> usize, t: f64, sim: impl Fn(&R, &R) -> f64) -> f64 {
    let mut total = 0.0;
    for p in items {
        for q in items {
            let sign = if key(p) == key(q) { 1.0 } else { -1.0 };
            total += (1.0 + (-sign * t * sim(&p.2, &q.2)).exp()).ln();
        }
    }
    total / (items.len() * items.len()) as f64
}

fn random_map(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

fn closed_form_oracle() -> Outcome {
    let mut errors = Vec::new();
    let map = Array4::from_shape_fn((2, 3, 3, 3), |(c, i, j, k)| (c + 2 * i + j * k) as f64 * 0.1);

    let single = PairBatch::from_grid(vec![vec![map.clone()]]).unwrap();
    let got = anatomical_contrastive_loss(&single, &ContrastiveConfig::with_temperature(10.0)).unwrap();
    errors.push(("N=1 t=10", (got - (-10.0f64).exp().ln_1p()).abs()));

    let cfg1 = ContrastiveConfig::with_temperature(1.0);
    let pair = PairBatch::from_grid(vec![vec![map.clone()], vec![map.clone()]]).unwrap();
    let got = anatomical_contrastive_loss(&pair, &cfg1).unwrap();
    let items: Vec<_> = (0..2).map(|u| (u, 0, map.clone())).collect();
    let want = scalar_pair_loss(&items, |p| p.0, 1.0, |a, b| scalar_ssim(a, b, cfg1.ssim_c1, cfg1.ssim_c2));
    let closed = ((-1.0f64).exp().ln_1p() + 1.0f64.exp().ln_1p()) / 2.0;
    errors.push(("ana N=2 identical", (got - want).abs().max((got - closed).abs())));

    let v = Array1::from(vec![0.3, -1.2, 0.5, 2.0]);
    let vecs = PairBatch::from_grid(vec![vec![v.clone()], vec![v.clone()]]).unwrap();
    let got = modality_contrastive_loss(&vecs, &cfg1).unwrap();
    errors.push(("mod N=2 identical", (got - (-1.0f64).exp().ln_1p()).abs()));

    // Random N=2, M=2 maps and vectors against the loop oracles.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ContrastiveConfig::with_temperature(3.0);
    let maps: Vec<Vec<Array4<f64>>> =
        (0..2).map(|_| (0..2).map(|_| random_map(&mut rng, (2, 3, 3, 3)) + 0.5).collect()).collect();
    let items: Vec<_> = (0..2)
        .flat_map(|u| (0..2).map(move |j| (u, j)))
        .map(|(u, j)| (u, j, maps[u][j].clone()))
        .collect();
    let got = anatomical_contrastive_loss(&PairBatch::from_grid(maps.clone()).unwrap(), &cfg).unwrap();
    let want = scalar_pair_loss(&items, |p| p.0, 3.0, |a, b| scalar_ssim(a, b, cfg.ssim_c1, cfg.ssim_c2));
    errors.push(("ana N=2 M=2 random", (got - want).abs()));

    let vecs: Vec<Vec<Array1<f64>>> = (0..2)
        .map(|_| (0..2).map(|_| Array1::from_shape_simple_fn(5, || rng.sample(StandardNormal))).collect())
        .collect();
    let items: Vec<_> = (0..2)
        .flat_map(|u| (0..2).map(move |j| (u, j)))
        .map(|(u, j)| (u, j, vecs[u][j].clone()))
        .collect();
    let cosine = |a: &Array1<f64>, b: &Array1<f64>| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let got = modality_contrastive_loss(&PairBatch::from_grid(vecs).unwrap(), &cfg).unwrap();
    let want = scalar_pair_loss(&items, |p| p.1, 3.0, cosine);
    errors.push(("mod N=2 M=2 random", (got - want).abs()));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Outcome::new(worst < ORACLE_TOLERANCE, format!("max abs err {worst:.2e} < {ORACLE_TOLERANCE:e} [{detail}]"))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.sample::<f32, _>(StandardNormal))
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn masking_invariance() -> Outcome {
    let cfg = toy_setup().model;
    let model = DcSegModel::new(cfg.clone(), 5).unwrap();
    let (m, c, d) = (cfg.modality_count, cfg.anat_channels, cfg.latent_side());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identical = 0;
    for trial in 0..MASKING_TRIALS {
        // Never the full mask, so every trial has a map to perturb.
        let mask = AvailabilityMask::from_bits(m, rng.gen_range(1..(1u32 << m) - 1));
        let anat: Vec<Tensor> = (0..m).map(|_| random_tensor(&mut rng, &[1, c, d, d, d])).collect();
        let codes: Vec<Tensor> = (0..m).map(|_| random_tensor(&mut rng, &[1, cfg.modality_dim])).collect();
        let mut perturbed = anat.clone();
        for j in (0..m).filter(|&j| !mask.is_available(j)) {
            perturbed[j] = if trial % 10 == 0 {
                Tensor::from_elem(anat[j].raw_dim(), f32::NAN)
            } else {
                random_tensor(&mut rng, &[1, c, d, d, d]).mapv(|v| v * 1e3)
            };
        }
        let outputs = |maps: &[Tensor]| {
            let z = model.fuse(maps, &mask).unwrap();
            let logits = model.decode_fused(&z).unwrap();
            let recs: Vec<Tensor> = (0..m).map(|j| model.decode_reconstruction(j, &z, &codes[j]).unwrap()).collect();
            (z, logits, recs)
        };
        let (z0, l0, r0) = outputs(&anat);
        let (z1, l1, r1) = outputs(&perturbed);
        if same_bits(&z0, &z1) && same_bits(&l0, &l1) && r0.iter().zip(&r1).all(|(a, b)| same_bits(a, b)) {
            identical += 1;
        }
    }
    Outcome::new(
        identical == MASKING_TRIALS,
        format!("{identical}/{MASKING_TRIALS} trials bit-identical in z, fused logits and reconstructions"),
    )
}

fn phantom_end_to_end(shared: &mut Shared) -> Outcome {
    let steps = shared.setup.train.epochs * shared.setup.train.steps_per_epoch.unwrap_or(0);
    let run = shared.full();
    let r = &run.report;
    let complete = r.region_index("complete").unwrap();
    let full = r.row(&AvailabilityMask::all(4)).unwrap().dice[complete];
    let singles: Vec<f64> = (0..4)
        .map(|j| r.row(&AvailabilityMask::from_bits(4, 1 << j)).unwrap().dice[complete])
        .collect();
    let by_size: Vec<f64> = (1..=4).map(|k| r.size_average(complete, k).unwrap()).collect();
    let monotone = by_size.windows(2).all(|w| w[1] >= w[0] - MONOTONE_SLACK);
    let min_single = singles.iter().copied().fold(f64::INFINITY, f64::min);
    Outcome::new(
        full >= FULL_DICE_MIN && min_single >= SINGLE_DICE_MIN && monotone && run.elapsed < TRAIN_BUDGET,
        format!(
            "{steps} steps in {:.0}s; full {full:.3} >= {FULL_DICE_MIN}; singles {singles:.3?} >= {SINGLE_DICE_MIN}; \
             size-k {by_size:.3?} monotone within {MONOTONE_SLACK}",
            run.elapsed.as_secs_f64()
        ),
    )
}

fn disentanglement(shared: &mut Shared) -> Outcome {
    let test = shared.test.clone();
    let model = &shared.full().model;
    let a = alignment_metrics(&encode_representations(model, &test).unwrap()).unwrap();
    let (ssim_gap, cos_gap) = (a.anatomical_gap(), a.modality_gap());
    Outcome::new(
        ssim_gap >= SSIM_GAP_MIN && cos_gap >= COSINE_GAP_MIN,
        format!(
            "SSIM intra {:.3} inter {:.3} gap {ssim_gap:.3} >= {SSIM_GAP_MIN}; cosine intra {:.3} inter {:.3} gap {cos_gap:.3} >= {COSINE_GAP_MIN}",
            a.intra_subject_ssim, a.inter_subject_ssim, a.intra_modality_cosine, a.inter_modality_cosine
        ),
    )
}

fn ablation_direction(shared: &mut Shared) -> Outcome {
    let mut variants = vec![LossSwitches::ALL, LossSwitches::ALL.without(LossTerm::Ana).without(LossTerm::Mod)];
    variants.extend(LossTerm::ALL.map(|t| LossSwitches::ALL.without(t)));
    let mut means = Vec::new();
    for sw in &variants {
        let scores: Vec<f64> = (0..ABLATION_SEEDS).map(|seed| shared.run(*sw, seed).score()).collect();
        means.push((sw.label(), scores.iter().sum::<f64>() / scores.len() as f64));
    }
    let full = means[0].1;
    // Gate on single-term ablations; the joint contrastive row is reported only.
    let passed = means[2..].iter().all(|(_, s)| full >= s - ABLATION_SLACK);
    let detail = means.iter().map(|(l, s)| format!("{l} {s:.4}")).collect::<Vec<_>>().join(", ");
    Outcome::new(
        passed,
        format!("mean over {ABLATION_SEEDS} seeds of region-averaged all-subset Dice: {detail}; full >= each single ablation - {ABLATION_SLACK}"),
    )
}

fn harness_arity(shared: &mut Shared) -> Outcome {
    let test = shared.test.clone();
    let model = &shared.full().model;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    save_checkpoint(&ckpt, model, &[], None).unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let loaded = load_checkpoint(&ckpt).unwrap().model;
        let report = evaluate_all_subsets(&loaded, &test, &RegionSpec::brats()).unwrap();
        let out = dir.path().join(format!("eval{run}"));
        report.write(&out).unwrap();
        let order: Vec<[u8; 4]> = report
            .rows
            .iter()
            .map(|r| std::array::from_fn(|j| r.mask.is_available(j) as u8))
            .collect();
        files.push((
            order,
            fs::read(out.join("subset_report.csv")).unwrap(),
            fs::read(out.join("subset_report.md")).unwrap(),
        ));
    }
    let rows = files[0].0.len();
    let ordered = files[0].0 == TABLE_ORDER;
    let identical = files[0].1 == files[1].1 && files[0].2 == files[1].2;
    Outcome::new(
        rows == 15 && ordered && identical,
        format!("{rows} rows, table order {ordered}, reruns byte-identical {identical}"),
    )
}

fn dropout_distribution() -> Outcome {
    let p = 0.5;
    let mut counts = [0usize; 16];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..MASK_DRAWS {
        counts[sample_availability(4, p, &mut rng).bits() as usize] += 1;
    }
    let n = MASK_DRAWS as f64;
    let mut worst: f64 = 0.0;
    for bits in 1..16u32 {
        let q = mask_probability(&AvailabilityMask::from_bits(4, bits), p);
        let sigma = (q * (1.0 - q) / n).sqrt();
        worst = worst.max((counts[bits as usize] as f64 / n - q).abs() / sigma);
    }
    Outcome::new(
        counts[0] == 0 && worst <= MASK_SIGMAS,
        format!(
            "{MASK_DRAWS} draws, empty mask {} times, worst deviation {worst:.2} sigma <= {MASK_SIGMAS}; singleton freq {:.4}",
            counts[0],
            counts[1] as f64 / n
        ),
    )
}

fn main() -> ExitCode {
    let mut shared = Shared::new();
    let criteria: Vec<(&str, Box<dyn FnMut(&mut Shared) -> Outcome>)> = vec![
        ("gradient suite", Box::new(|_| gradient_suite())),
        ("closed-form loss oracle", Box::new(|_| closed_form_oracle())),
        ("masking invariance", Box::new(|_| masking_invariance())),
        ("phantom end-to-end", Box::new(phantom_end_to_end)),
        ("disentanglement", Box::new(disentanglement)),
        ("ablation direction", Box::new(ablation_direction)),
        ("harness arity and determinism", Box::new(harness_arity)),
        ("dropout distribution", Box::new(|_| dropout_distribution())),
    ];
    let mut failures = 0;
    for (i, (name, mut check)) in criteria.into_iter().enumerate() {
        let outcome = check(&mut shared);
        failures += usize::from(!outcome.passed);
        println!(
            "acceptance {} {name}: {} | {}",
            i + 1,
            if outcome.passed { "PASS" } else { "FAIL" },
            outcome.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
