//! Bidirectional sigmoid contrastive losses.
//!
//! Every ordered pair `(p, q)` of the `N·M` batch items contributes
//! `-log σ(f(p, q) · t · sim(p, q))`, where `f` is `+1` for pairs that share
//! the grouping key (the sample for anatomical maps, the modality for
//! modality vectors) and `-1` otherwise. There is no bias term inside the
//! sigmoid.

use std::collections::HashSet;

use ndarray::{Array1, Array2, Array4, ArrayView1};

use super::ssim::{ssim_channel_mean, ssim_channel_mean_grad, DEFAULT_C1, DEFAULT_C2};
use crate::error::{Error, Result};

/// Multichannel anatomical feature map, `(C, d, d, d)`.
pub type FeatureMap = Array4<f64>;
/// Low-dimensional modality code.
pub type ModalityVector = Array1<f64>;

/// `+1` when both indices are equal, `-1` otherwise.
pub fn pair_indicator(u: usize, u_prime: usize) -> f64 {
    if u == u_prime {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub include_self_pairs: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            ssim_c1: DEFAULT_C1,
            ssim_c2: DEFAULT_C2,
            include_self_pairs: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn with_temperature(temperature: f64) -> Self {
        Self {
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::contract("SSIM constants must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PairItem<R> {
    pub sample: usize,
    pub modality: usize,
    pub rep: R,
}

/// `N·M` representations, one per (sample, modality) cell, indexed from zero.
#[derive(Debug, Clone)]
pub struct PairBatch<R> {
    items: Vec<PairItem<R>>,
    samples: usize,
    modalities: usize,
}

impl<R> PairBatch<R> {
    pub fn new(items: Vec<PairItem<R>>, samples: usize, modalities: usize) -> Result<Self> {
        if samples == 0 || modalities == 0 {
            return Err(Error::contract("pair batch needs N >= 1 and M >= 1"));
        }
        if items.len() != samples * modalities {
            return Err(Error::contract(format!(
                "pair batch has {} items, expected N*M = {}",
                items.len(),
                samples * modalities
            )));
        }
        let mut seen = HashSet::with_capacity(items.len());
        for it in &items {
            if it.sample >= samples || it.modality >= modalities {
                return Err(Error::contract(format!(
                    "item ({}, {}) outside {samples}x{modalities} grid",
                    it.sample, it.modality
                )));
            }
            if !seen.insert((it.sample, it.modality)) {
                return Err(Error::contract(format!(
                    "duplicate item ({}, {})",
                    it.sample, it.modality
                )));
            }
        }
        Ok(Self {
            items,
            samples,
            modalities,
        })
    }

    /// Builds a batch from `reps[sample][modality]`.
    pub fn from_grid(reps: Vec<Vec<R>>) -> Result<Self> {
        let samples = reps.len();
        let modalities = reps.first().map_or(0, Vec::len);
        let mut items = Vec::with_capacity(samples * modalities);
        for (i, row) in reps.into_iter().enumerate() {
            if row.len() != modalities {
                return Err(Error::contract("ragged representation grid"));
            }
            items.extend(row.into_iter().enumerate().map(|(j, rep)| PairItem {
                sample: i,
                modality: j,
                rep,
            }));
        }
        Self::new(items, samples, modalities)
    }

    pub fn items(&self) -> &[PairItem<R>] {
        &self.items
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Loss value with gradients for every batch item (in item order) and for
/// the temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad<G> {
    pub loss: f64,
    pub rep_grads: Vec<G>,
    pub d_temperature: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct PairTerms {
    loss: f64,
    /// dL/dS for ordered pair (p, q).
    d_sim: Array2<f64>,
    d_temperature: f64,
}

/// Sigmoid pair loss over a precomputed similarity matrix.
fn sigmoid_pair_loss(sim: &Array2<f64>, keys: &[usize], cfg: &ContrastiveConfig) -> PairTerms {
    let n = keys.len();
    let t = cfg.temperature;
    let pairs = if cfg.include_self_pairs {
        n * n
    } else {
        n * (n - 1)
    };
    let mut d_sim = Array2::zeros((n, n));
    if pairs == 0 {
        return PairTerms {
            loss: 0.0,
            d_sim,
            d_temperature: 0.0,
        };
    }
    let scale = 1.0 / pairs as f64;
    let (mut loss, mut d_t) = (0.0, 0.0);
    for p in 0..n {
        for q in 0..n {
            if p == q && !cfg.include_self_pairs {
                continue;
            }
            let f = pair_indicator(keys[p], keys[q]);
            let s = sim[[p, q]];
            let z = f * t * s;
            loss += softplus(-z);
            // d softplus(-z) / dz = -σ(-z)
            let g = -sigmoid(-z) * scale;
            d_sim[[p, q]] = g * f * t;
            d_t += g * f * s;
        }
    }
    PairTerms {
        loss: loss * scale,
        d_sim,
        d_temperature: d_t,
    }
}

fn ssim_matrix(maps: &[&FeatureMap], cfg: &ContrastiveConfig) -> Result<Array2<f64>> {
    let n = maps.len();
    let mut sim = Array2::zeros((n, n));
    for p in 0..n {
        for q in p..n {
            let s = ssim_channel_mean(maps[p].view(), maps[q].view(), cfg.ssim_c1, cfg.ssim_c2)?;
            sim[[p, q]] = s;
            sim[[q, p]] = s;
        }
    }
    Ok(sim)
}

fn check_batch<R>(batch: &PairBatch<R>, cfg: &ContrastiveConfig) -> Result<()> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::contract("empty pair batch"));
    }
    Ok(())
}

/// Anatomical contrastive loss: same-sample pairs are positives.
pub fn anatomical_contrastive_loss(batch: &PairBatch<FeatureMap>, cfg: &ContrastiveConfig) -> Result<f64> {
    check_batch(batch, cfg)?;
    let maps: Vec<&FeatureMap> = batch.items.iter().map(|it| &it.rep).collect();
    let keys: Vec<usize> = batch.items.iter().map(|it| it.sample).collect();
    let sim = ssim_matrix(&maps, cfg)?;
    Ok(sigmoid_pair_loss(&sim, &keys, cfg).loss)
}

/// [`anatomical_contrastive_loss`] with gradients.
pub fn anatomical_contrastive_loss_grad(
    batch: &PairBatch<FeatureMap>,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveGrad<FeatureMap>> {
    check_batch(batch, cfg)?;
    let maps: Vec<&FeatureMap> = batch.items.iter().map(|it| &it.rep).collect();
    let keys: Vec<usize> = batch.items.iter().map(|it| it.sample).collect();
    let n = maps.len();
    for m in &maps[1..] {
        if m.shape() != maps[0].shape() {
            return Err(Error::ShapeMismatch {
                expected: maps[0].shape().to_vec(),
                actual: m.shape().to_vec(),
            });
        }
    }

    let mut sim = Array2::zeros((n, n));
    let mut partials = Vec::with_capacity(n * (n - 1) / 2);
    for p in 0..n {
        for q in p..n {
            if p == q {
                sim[[p, p]] = ssim_channel_mean(maps[p].view(), maps[p].view(), cfg.ssim_c1, cfg.ssim_c2)?;
                continue;
            }
            let (s, gp, gq) =
                ssim_channel_mean_grad(maps[p].view(), maps[q].view(), cfg.ssim_c1, cfg.ssim_c2)?;
            sim[[p, q]] = s;
            sim[[q, p]] = s;
            partials.push((p, q, gp, gq));
        }
    }
    let terms = sigmoid_pair_loss(&sim, &keys, cfg);

    // Self-pairs have sim(a, a) == 1 for every a, so they carry no gradient.
    let mut grads: Vec<FeatureMap> = maps.iter().map(|m| Array4::zeros(m.raw_dim())).collect();
    for (p, q, gp, gq) in partials {
        let g = terms.d_sim[[p, q]] + terms.d_sim[[q, p]];
        grads[p].scaled_add(g, &gp);
        grads[q].scaled_add(g, &gq);
    }
    Ok(ContrastiveGrad {
        loss: terms.loss,
        rep_grads: grads,
        d_temperature: terms.d_temperature,
    })
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let (na, nb) = check_vectors(a, b)?;
    Ok(a.dot(&b) / (na * nb))
}

fn check_vectors(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::contract("modality vector contains non-finite values"));
    }
    let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("zero-norm modality vector"));
    }
    Ok((na, nb))
}

fn cosine_matrix(vecs: &[&ModalityVector]) -> Result<Array2<f64>> {
    let n = vecs.len();
    let mut sim = Array2::zeros((n, n));
    for p in 0..n {
        // sim(m, m) is one by definition; avoids rounding in m·m / ‖m‖².
        check_vectors(vecs[p].view(), vecs[p].view())?;
        sim[[p, p]] = 1.0;
        for q in p + 1..n {
            let s = cosine_similarity(vecs[p].view(), vecs[q].view())?;
            sim[[p, q]] = s;
            sim[[q, p]] = s;
        }
    }
    Ok(sim)
}

/// Modality contrastive loss: same-modality pairs are positives.
pub fn modality_contrastive_loss(batch: &PairBatch<ModalityVector>, cfg: &ContrastiveConfig) -> Result<f64> {
    check_batch(batch, cfg)?;
    let vecs: Vec<&ModalityVector> = batch.items.iter().map(|it| &it.rep).collect();
    let keys: Vec<usize> = batch.items.iter().map(|it| it.modality).collect();
    let sim = cosine_matrix(&vecs)?;
    Ok(sigmoid_pair_loss(&sim, &keys, cfg).loss)
}

/// [`modality_contrastive_loss`] with gradients.
pub fn modality_contrastive_loss_grad(
    batch: &PairBatch<ModalityVector>,
    cfg: &ContrastiveConfig,
) -> Result<ContrastiveGrad<ModalityVector>> {
    check_batch(batch, cfg)?;
    let vecs: Vec<&ModalityVector> = batch.items.iter().map(|it| &it.rep).collect();
    let keys: Vec<usize> = batch.items.iter().map(|it| it.modality).collect();
    let sim = cosine_matrix(&vecs)?;
    let terms = sigmoid_pair_loss(&sim, &keys, cfg);

    let n = vecs.len();
    let norms: Vec<f64> = vecs.iter().map(|v| v.dot(*v).sqrt()).collect();
    let mut grads: Vec<ModalityVector> = vecs.iter().map(|v| Array1::zeros(v.len())).collect();
    for p in 0..n {
        for q in p + 1..n {
            let g = terms.d_sim[[p, q]] + terms.d_sim[[q, p]];
            let s = sim[[p, q]];
            let inv = 1.0 / (norms[p] * norms[q]);
            // d sim / d m_p = m_q / (|m_p||m_q|) - sim m_p / |m_p|²
            grads[p].scaled_add(g * inv, vecs[q]);
            grads[p].scaled_add(-g * s / (norms[p] * norms[p]), vecs[p]);
            grads[q].scaled_add(g * inv, vecs[p]);
            grads[q].scaled_add(-g * s / (norms[q] * norms[q]), vecs[q]);
        }
    }
    Ok(ContrastiveGrad {
        loss: terms.loss,
        rep_grads: grads,
        d_temperature: terms.d_temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};

    fn map(seed: f64) -> FeatureMap {
        Array::from_shape_fn((2, 3, 3, 3), |(c, i, j, k)| {
            (seed * (1 + c) as f64 + i as f64 * 0.9 - j as f64 * 1.7 + k as f64 * 0.3).sin()
        })
    }

    #[test]
    fn indicator() {
        assert_eq!(pair_indicator(3, 3), 1.0);
        assert_eq!(pair_indicator(3, 5), -1.0);
        assert_eq!(pair_indicator(1, 1), 1.0);
    }

    #[test]
    fn single_self_pair_closed_form() {
        let batch = PairBatch::from_grid(vec![vec![map(0.4)]]).unwrap();
        for t in [1.0, 10.0] {
            let l = anatomical_contrastive_loss(&batch, &ContrastiveConfig::with_temperature(t)).unwrap();
            assert!((l - (-t as f64).exp().ln_1p()).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_validation() {
        let items = vec![
            PairItem { sample: 0, modality: 0, rep: arr1(&[1.0]) },
            PairItem { sample: 0, modality: 0, rep: arr1(&[1.0]) },
        ];
        assert!(PairBatch::new(items, 1, 2).is_err());
        let items = vec![PairItem { sample: 1, modality: 0, rep: arr1(&[1.0]) }];
        assert!(PairBatch::new(items, 1, 1).is_err());
        assert!(PairBatch::<ModalityVector>::new(vec![], 0, 0).is_err());
    }

    #[test]
    fn zero_norm_vector_rejected() {
        let batch = PairBatch::from_grid(vec![vec![arr1(&[0.0, 0.0]), arr1(&[1.0, 0.0])]]).unwrap();
        let r = modality_contrastive_loss(&batch, &ContrastiveConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn excluding_self_pairs_averages_over_cross_pairs() {
        let a = map(0.2);
        let batch = PairBatch::from_grid(vec![vec![a.clone()], vec![a]]).unwrap();
        let cfg = ContrastiveConfig {
            temperature: 1.0,
            include_self_pairs: false,
            ..Default::default()
        };
        // Two cross-sample pairs with SSIM = 1 and f = -1.
        let l = anatomical_contrastive_loss(&batch, &cfg).unwrap();
        assert!((l - 1f64.exp().ln_1p()).abs() < 1e-12);
    }

    #[test]
    fn grad_variant_agrees_on_value() {
        let grid = vec![vec![map(0.1), map(0.5)], vec![map(1.1), map(2.0)]];
        let batch = PairBatch::from_grid(grid).unwrap();
        let cfg = ContrastiveConfig::default();
        let l = anatomical_contrastive_loss(&batch, &cfg).unwrap();
        let g = anatomical_contrastive_loss_grad(&batch, &cfg).unwrap();
        assert!((l - g.loss).abs() < 1e-15);
        assert_eq!(g.rep_grads.len(), 4);
    }
}
