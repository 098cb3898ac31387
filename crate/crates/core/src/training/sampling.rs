use rand::Rng;

use crate::networks::AvailabilityMask;

/// Draws `δ_j ~ Bernoulli(p)` independently, redrawing the whole mask until
/// at least one modality is available.
pub fn sample_availability<R: Rng + ?Sized>(m: usize, p: f64, rng: &mut R) -> AvailabilityMask {
    assert!(m >= 1, "need at least one modality");
    assert!(p > 0.0 && p <= 1.0, "keep probability must lie in (0, 1]");
    loop {
        let delta: Vec<bool> = (0..m).map(|_| rng.gen_bool(p)).collect();
        if delta.iter().any(|&d| d) {
            return AvailabilityMask::new(delta);
        }
    }
}

/// Probability of `mask` under the conditioned Bernoulli distribution.
pub fn mask_probability(mask: &AvailabilityMask, p: f64) -> f64 {
    let m = mask.len() as i32;
    if mask.count() == 0 {
        return 0.0;
    }
    let k = mask.count() as i32;
    p.powi(k) * (1.0 - p).powi(m - k) / (1.0 - (1.0 - p).powi(m))
}

/// Marginal availability rate of one modality under the same distribution.
pub fn marginal_availability(m: usize, p: f64) -> f64 {
    p / (1.0 - (1.0 - p).powi(m as i32))
}
