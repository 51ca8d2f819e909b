//! Additive output noise on the performance vector.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Adds zero-mean Gaussian noise to each of `groups` equal blocks of `h`,
/// with variance `mean_square(block) / 10^(snr_db/10)`. Blocks with zero
/// power and a `+∞` SNR leave `h` untouched.
pub fn inject_measurement_noise<R: Rng + ?Sized>(
    h: &DVector<f64>,
    groups: usize,
    snr_db: f64,
    rng: &mut R,
) -> DVector<f64> {
    assert!(!snr_db.is_nan(), "snr_db must not be NaN");
    assert!(
        groups > 0 && h.len().is_multiple_of(groups),
        "h does not split into {groups} groups"
    );
    let mut out = h.clone();
    if snr_db == f64::INFINITY {
        return out;
    }
    let n = h.len() / groups;
    for g in 0..groups {
        let block = h.rows(g * n, n);
        let power = block.norm_squared() / n as f64;
        let var = power / 10f64.powf(snr_db / 10.0);
        if !(var > 0.0) || !var.is_finite() {
            continue;
        }
        let dist = Normal::new(0.0, var.sqrt()).expect("finite std");
        for i in 0..n {
            out[g * n + i] += dist.sample(rng);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infinite_snr_is_identity() {
        let h = DVector::from_fn(9, |i, _| i as f64 - 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_measurement_noise(&h, 3, f64::INFINITY, &mut rng), h);
    }

    #[test]
    fn zero_power_group_stays_zero() {
        let mut h = DVector::zeros(6);
        h[0] = 1.0;
        h[1] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = inject_measurement_noise(&h, 3, 2.0, &mut rng);
        assert_eq!(out.rows(2, 4), DVector::zeros(4).rows(0, 4));
        assert_ne!(out.rows(0, 2), h.rows(0, 2));
    }

    #[test]
    fn unit_block_variance_at_two_db() {
        // Constant block of ones: noise variance is 10^(-0.2) ≈ 0.6310.
        let n = 100_000;
        let h = DVector::from_element(n, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = inject_measurement_noise(&h, 1, 2.0, &mut rng);
        let noise = out.add_scalar(-1.0);
        let mean = noise.mean();
        let var = noise.map(|e| (e - mean).powi(2)).sum() / (n - 1) as f64;
        assert!((var - 0.6310).abs() < 0.01, "variance {var}");
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn empirical_snr_matches_target() {
        let n = 100_000;
        let h = DVector::from_fn(3 * n, |i, _| match i / n {
            0 => (i as f64 * 0.01).sin(),
            1 => 5.0 * (i as f64 * 0.003).cos(),
            _ => 20.0 + (i % 7) as f64,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = inject_measurement_noise(&h, 3, 2.0, &mut rng);
        for g in 0..3 {
            let sig = h.rows(g * n, n).norm_squared();
            let noise = (out.rows(g * n, n) - h.rows(g * n, n)).norm_squared();
            let snr = 10.0 * (sig / noise).log10();
            assert!((snr - 2.0).abs() < 0.2, "group {g}: {snr} dB");
        }
    }
}
