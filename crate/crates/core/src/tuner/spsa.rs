//! Simultaneous perturbation stochastic approximation.

use super::{Bounds, TunerError};
use nalgebra::DVector;
use rand::Rng;

/// Squared norms of the velocity and path blocks of a performance vector
/// with window length `n`; the cost block is ignored.
pub fn spsa_loss(h: &DVector<f64>, n: usize) -> Result<f64, TunerError> {
    if h.len() != 3 * n {
        return Err(TunerError::Dimension(format!(
            "h has {} entries, expected {}",
            h.len(),
            3 * n
        )));
    }
    Ok(h.rows(0, 2 * n).norm_squared())
}

/// Bernoulli perturbation with entries `±magnitude`.
pub fn draw_delta<R: Rng + ?Sized>(p: usize, magnitude: f64, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(p, |_, _| {
        if rng.random::<bool>() {
            magnitude
        } else {
            -magnitude
        }
    })
}

/// One two-sided gradient estimate along `delta`.
pub fn pair_estimate(l_plus: f64, l_minus: f64, c: f64, delta: &DVector<f64>) -> DVector<f64> {
    delta.map(|d| (l_plus - l_minus) / (2.0 * c * d))
}

#[derive(Debug, Clone)]
pub struct SpsaEstimate {
    pub gradient: DVector<f64>,
    pub deltas: Vec<DVector<f64>>,
    /// Pairs whose evaluation failed and were left out of the average.
    pub failed_pairs: Vec<usize>,
    /// Pairs where `θ ± cΔ` had to be clipped to the bounds.
    pub clipped_pairs: Vec<usize>,
}

/// Averages `num_pairs` two-sided estimates. Pair `i` uses magnitude
/// `magnitudes[i % len]`; `loss(i, θ)` returns `None` on failure. The
/// difference quotient always divides by the nominal `2c`.
pub fn spsa_gradient<R, F>(
    theta: &DVector<f64>,
    mut loss: F,
    c: f64,
    magnitudes: &[f64],
    num_pairs: usize,
    bounds: &Bounds,
    rng: &mut R,
) -> Result<SpsaEstimate, TunerError>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &DVector<f64>) -> Option<f64>,
{
    if !(c > 0.0) || magnitudes.is_empty() || num_pairs == 0 {
        return Err(TunerError::InvalidConfig(
            "SPSA needs c > 0, magnitudes and pairs".into(),
        ));
    }
    let p = theta.len();
    let deltas: Vec<DVector<f64>> = (0..num_pairs)
        .map(|i| draw_delta(p, magnitudes[i % magnitudes.len()], rng))
        .collect();
    let mut sum = DVector::zeros(p);
    let mut used = 0usize;
    let mut failed_pairs = Vec::new();
    let mut clipped_pairs = Vec::new();
    for (i, delta) in deltas.iter().enumerate() {
        let plus = theta + delta * c;
        let minus = theta - delta * c;
        let (pc, mc) = (bounds.clip(&plus), bounds.clip(&minus));
        if pc != plus || mc != minus {
            clipped_pairs.push(i);
        }
        match (loss(i, &pc), loss(i, &mc)) {
            (Some(lp), Some(lm)) => {
                sum += pair_estimate(lp, lm, c, delta);
                used += 1;
            }
            _ => failed_pairs.push(i),
        }
    }
    if used == 0 {
        return Err(TunerError::RolloutsFailed {
            failed: failed_pairs.len(),
            limit: num_pairs - 1,
        });
    }
    Ok(SpsaEstimate {
        gradient: sum / used as f64,
        deltas,
        failed_pairs,
        clipped_pairs,
    })
}

/// Gradient step `θ' = clip(θ − a·ĝ)`.
pub fn spsa_update(
    theta: &DVector<f64>,
    g_hat: &DVector<f64>,
    a: f64,
    bounds: &Bounds,
) -> DVector<f64> {
    bounds.clip(&(theta - g_hat * a))
}

/// Averages the filter and gradient steps; a missing step falls back to the
/// other one alone.
pub fn combined_step(
    theta: &DVector<f64>,
    delta_ukf: Option<&DVector<f64>>,
    delta_spsa: Option<&DVector<f64>>,
    bounds: &Bounds,
) -> DVector<f64> {
    let step = match (delta_ukf, delta_spsa) {
        (Some(u), Some(s)) => (u + s) * 0.5,
        (Some(u), None) => u.clone(),
        (None, Some(s)) => s.clone(),
        (None, None) => DVector::zeros(theta.len()),
    };
    bounds.clip(&(theta + step))
}
