//! Procedural multimodal phantoms: one shared ellipsoidal anatomy rendered
//! through a distinct intensity transfer per modality.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize_in_mask, MultimodalVolume};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 200;
/// Inner white-matter ellipsoid as a fraction of the brain semi-axes.
const WHITE_MATTER_SCALE: f64 = 0.65;

/// Piecewise-linear map from tissue index to intensity.
///
/// Tissue indices: `0` white matter, `1` grey matter, `1 + c` lesion class
/// `c`. Knot abscissae are strictly increasing; the map is constant beyond
/// the outer knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityTransfer {
    pub knots: Vec<[f64; 2]>,
}

impl IntensityTransfer {
    pub fn new(knots: Vec<[f64; 2]>) -> Result<Self> {
        let t = Self { knots };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::config("transfers", "a transfer needs at least one knot"));
        }
        if self.knots.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("transfers", "knots must be finite"));
        }
        if self.knots.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err(Error::config("transfers", "knot abscissae must be strictly increasing"));
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        if x <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            let ([x0, y0], [x1, y1]) = (w[0], w[1]);
            if x <= x1 {
                return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
            }
        }
        k[k.len() - 1][1]
    }

    /// Default transfer for modality `j` over `tissue_count` tissues.
    ///
    /// Cycles identity ramp, inverted ramp, lesion-suppressing and
    /// lesion-enhancing; later cycles are offset so all maps stay distinct.
    pub fn preset(j: usize, tissue_count: usize) -> Self {
        let last = (tissue_count.max(3) - 1) as f64;
        let offset = 0.1 * (j / 4) as f64;
        let knots = match j % 4 {
            0 => vec![[0.0, 0.2], [last, 1.0]],
            1 => vec![[0.0, 1.0], [last, 0.2]],
            2 => vec![[0.0, 0.7], [1.0, 0.5], [2.0, 0.3], [last.max(2.5), 0.4]],
            _ => vec![[0.0, 0.3], [1.0, 0.45], [2.0, 0.9], [last.max(2.5), 1.0]],
        };
        Self {
            knots: knots.into_iter().map(|[x, y]| [x, y + offset]).collect(),
        }
    }
}

/// Generating parameters of one phantom subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid_side: usize,
    pub modality_count: usize,
    /// Label classes including background; lesions carry labels `1..K`.
    pub class_count: usize,
    /// Inclusive range of lesions per subject.
    pub lesion_count: [usize; 2],
    /// Inclusive range of lesion radii in voxels.
    pub lesion_radius: [f64; 2],
    pub transfers: Vec<IntensityTransfer>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::new(32, 4, 4, 0)
    }
}

impl PhantomSpec {
    /// Spec with preset transfers and lesion sizes scaled to `grid_side`.
    pub fn new(grid_side: usize, modality_count: usize, class_count: usize, seed: u64) -> Self {
        let tissues = class_count + 1;
        let scale = grid_side as f64 / 32.0;
        Self {
            grid_side,
            modality_count,
            class_count,
            lesion_count: [1, 2],
            lesion_radius: [3.0 * scale, 6.0 * scale],
            transfers: (0..modality_count)
                .map(|j| IntensityTransfer::preset(j, tissues))
                .collect(),
            noise_sigma: 0.05,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn tissue_count(&self) -> usize {
        self.class_count + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 16 {
            return Err(Error::config("grid_side", "must be at least 16"));
        }
        if self.modality_count == 0 {
            return Err(Error::config("modality_count", "must be at least 1"));
        }
        if !(2..=256).contains(&self.class_count) {
            return Err(Error::config("class_count", "must lie in 2..=256"));
        }
        let [c0, c1] = self.lesion_count;
        if c0 > c1 {
            return Err(Error::config("lesion_count", "range is empty"));
        }
        let [r0, r1] = self.lesion_radius;
        if !(r0.is_finite() && r1.is_finite() && r0 > 0.0 && r0 <= r1) {
            return Err(Error::config("lesion_radius", "need 0 < low <= high"));
        }
        if r1 >= 0.35 * self.grid_side as f64 {
            return Err(Error::config("lesion_radius", "lesions would not fit inside the brain"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        if self.transfers.len() != self.modality_count {
            return Err(Error::config("transfers", "need one transfer per modality"));
        }
        for t in &self.transfers {
            t.validate()?;
        }
        let levels: Vec<Vec<f64>> = self.transfers.iter().map(|t| self.levels(t)).collect();
        for a in 0..levels.len() {
            for b in a + 1..levels.len() {
                if levels[a] == levels[b] {
                    return Err(Error::config(
                        "transfers",
                        format!("modalities {a} and {b} render identically"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn levels(&self, t: &IntensityTransfer) -> Vec<f64> {
        (0..self.tissue_count()).map(|i| t.eval(i as f64)).collect()
    }

    /// Lesion labels from the outermost shell inwards.
    ///
    /// With four classes the shells follow the tumor layout: edema (2),
    /// enhancing rim (3), necrotic core (1).
    fn shell_labels(&self) -> Vec<u8> {
        if self.class_count == 4 {
            vec![2, 3, 1]
        } else {
            (1..self.class_count as u8).rev().collect()
        }
    }
}

struct Lesion {
    center: [f64; 3],
    radius: f64,
}

fn dist(p: [f64; 3], q: [f64; 3]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn sphere_inside(brain: &Array3<bool>, l: &Lesion) -> bool {
    let side = brain.shape();
    let lo = |c: f64| (c - l.radius).floor().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + l.radius).ceil() as usize).min(n - 1);
    for i in lo(l.center[0])..=hi(l.center[0], side[0]) {
        for j in lo(l.center[1])..=hi(l.center[1], side[1]) {
            for k in lo(l.center[2])..=hi(l.center[2], side[2]) {
                if dist([i as f64, j as f64, k as f64], l.center) <= l.radius && !brain[[i, j, k]] {
                    return false;
                }
            }
        }
    }
    true
}

/// Renders the subject described by `spec`, z-scored within the brain.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<MultimodalVolume> {
    spec.validate()?;
    let n = spec.grid_side;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mid = (n as f64 - 1.0) / 2.0;
    let center: [f64; 3] = std::array::from_fn(|_| mid + rng.gen_range(-1.0..=1.0));
    let axes: [f64; 3] = std::array::from_fn(|_| n as f64 * rng.gen_range(0.37..=0.43));
    let ellipse_r = |p: [f64; 3]| -> f64 {
        (0..3)
            .map(|d| ((p[d] - center[d]) / axes[d]).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    // Tissue index per voxel; background is `None`.
    let mut tissue = Array3::<Option<u8>>::from_shape_fn((n, n, n), |(i, j, k)| {
        let r = ellipse_r([i as f64, j as f64, k as f64]);
        if r > 1.0 {
            None
        } else if r <= WHITE_MATTER_SCALE {
            Some(0)
        } else {
            Some(1)
        }
    });
    let brain = tissue.mapv(|t| t.is_some());

    let count = rng.gen_range(spec.lesion_count[0]..=spec.lesion_count[1]);
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.gen_range(spec.lesion_radius[0]..=spec.lesion_radius[1]);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c: [f64; 3] = std::array::from_fn(|d| {
                rng.gen_range(center[d] - axes[d]..=center[d] + axes[d])
            });
            let cand = Lesion { center: c, radius };
            if sphere_inside(&brain, &cand) {
                placed = Some(cand);
                break;
            }
        }
        lesions.push(placed.ok_or(Error::LesionPlacement {
            attempts: PLACEMENT_ATTEMPTS,
        })?);
    }

    let shells = spec.shell_labels();
    let mut label = Array3::<u8>::zeros((n, n, n));
    for l in &lesions {
        for ((i, j, k), c) in label.indexed_iter_mut() {
            let d = dist([i as f64, j as f64, k as f64], l.center);
            if d > l.radius {
                continue;
            }
            // Shell s covers radii in (r (L-s-1)/L, r (L-s)/L].
            let depth = ((1.0 - d / l.radius) * shells.len() as f64).floor() as usize;
            let cls = shells[depth.min(shells.len() - 1)];
            *c = cls;
            tissue[[i, j, k]] = Some(1 + cls);
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut volumes = Vec::with_capacity(spec.modality_count);
    for t in &spec.transfers {
        let levels = spec.levels(t);
        let raw = tissue.mapv(|ti| match ti {
            Some(ti) => (levels[ti as usize] + noise.sample(&mut rng)) as f32,
            None => 0.0,
        });
        volumes.push(normalize_in_mask(&raw, &brain)?);
    }

    MultimodalVolume::new(format!("phantom_{}", spec.seed), volumes, label, brain)
}
