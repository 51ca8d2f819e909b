//! Sigma-point (unscented) estimation of the weight vector.

use super::{Bounds, TunerError};
use nalgebra::{DMatrix, DVector};

/// Unscented weights `w⁰ = λ/(p+λ)`, `wʲ = 1/(2(p+λ))`.
pub fn compute_weights(p: usize, lambda: f64) -> Result<Vec<f64>, TunerError> {
    let d = p as f64 + lambda;
    if !(d > 0.0) {
        return Err(TunerError::InvalidConfig(format!(
            "p + lambda = {d} must be positive"
        )));
    }
    let mut w = vec![1.0 / (2.0 * d); 2 * p + 1];
    w[0] = lambda / d;
    Ok(w)
}

/// Lower Cholesky factor of a symmetric PSD matrix. Zero pivots are allowed
/// (the corresponding column is zero); clearly negative ones fail.
pub fn psd_cholesky(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = p.nrows();
    let mut l = DMatrix::zeros(n, n);
    let scale = p.diagonal().amax().max(1e-300);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e-10 * scale {
            return None;
        }
        if d <= 1e-14 * scale {
            // Rank-deficient direction: the rest of the column must vanish too.
            for i in j + 1..n {
                let mut v = p[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                if v.abs() > 1e-8 * scale {
                    return None;
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut v = p[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / djj;
        }
    }
    Some(l)
}

/// Symmetrizes and floors the eigenvalues at `floor`.
pub fn repair_psd(p: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (p + p.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Largest common scale `c ≤ c0` keeping every `θ ± c·Aʲ` inside the bounds.
/// Returns 0 when θ sits on a bound along a direction the factor moves.
pub fn regularize_step(theta: &DVector<f64>, a: &DMatrix<f64>, bounds: &Bounds, c0: f64) -> f64 {
    let mut c = c0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)].abs();
            if aij == 0.0 {
                continue;
            }
            let room = (bounds.high[i] - theta[i])
                .min(theta[i] - bounds.low[i])
                .max(0.0);
            c = c.min(room / aij);
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct SigmaSet {
    pub points: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
    pub c_used: f64,
    /// `c_used` fell to zero: every point collapsed onto the mean.
    pub degenerate: bool,
}

/// Sigma points `θ`, `θ ± c_k·Aʲ` around the belief with `A` the lower
/// Cholesky factor of the covariance.
pub fn sample_sigma_points(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    lambda: f64,
    bounds: &Bounds,
) -> Result<SigmaSet, TunerError> {
    let p = mean.len();
    let weights = compute_weights(p, lambda)?;
    let a = match psd_cholesky(cov) {
        Some(a) => a,
        None => psd_cholesky(&repair_psd(cov, 1e-10)).ok_or(TunerError::Cholesky)?,
    };
    let c0 = (p as f64 + lambda).sqrt();
    let c = regularize_step(mean, &a, bounds, c0);
    let mut points = Vec::with_capacity(2 * p + 1);
    points.push(mean.clone());
    for j in 0..p {
        points.push(mean + a.column(j) * c);
    }
    for j in 0..p {
        points.push(mean - a.column(j) * c);
    }
    // Guard against round-off pushing a touching point a hair outside.
    for pt in points.iter_mut() {
        *pt = bounds.clip(pt);
    }
    Ok(SigmaSet {
        points,
        weights,
        c_used: c,
        degenerate: c == 0.0,
    })
}

/// Output of [`unscented_transform`].
#[derive(Debug, Clone)]
pub struct Propagated {
    pub theta_bar: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub y_points: Vec<DVector<f64>>,
    pub y_bar: DVector<f64>,
    /// Indices of sigma points whose rollout failed (replaced by `Y⁰`).
    pub failed: Vec<usize>,
}

/// Propagates the sigma points through `rollout` (`None` marks a failure).
pub fn unscented_transform<F>(
    sigma: &SigmaSet,
    mut rollout: F,
    c_theta: &DMatrix<f64>,
) -> Result<Propagated, TunerError>
where
    F: FnMut(usize, &DVector<f64>) -> Option<DVector<f64>>,
{
    let p = sigma.points[0].len();
    let mut theta_bar = DVector::zeros(p);
    for (w, pt) in sigma.weights.iter().zip(&sigma.points) {
        theta_bar.axpy(*w, pt, 1.0);
    }
    let mut p_pred = c_theta.clone();
    for (w, pt) in sigma.weights.iter().zip(&sigma.points) {
        let d = pt - &theta_bar;
        p_pred.ger(*w, &d, &d, 1.0);
    }

    let outputs: Vec<Option<DVector<f64>>> = sigma
        .points
        .iter()
        .enumerate()
        .map(|(j, pt)| rollout(j, pt))
        .collect();
    let failed: Vec<usize> = (0..outputs.len())
        .filter(|&j| outputs[j].is_none())
        .collect();
    let limit = p.div_ceil(2);
    let y0 = match &outputs[0] {
        Some(y) => y.clone(),
        None => {
            return Err(TunerError::RolloutsFailed {
                failed: failed.len(),
                limit,
            })
        }
    };
    if failed.len() > limit {
        return Err(TunerError::RolloutsFailed {
            failed: failed.len(),
            limit,
        });
    }
    let y_points: Vec<DVector<f64>> = outputs
        .into_iter()
        .map(|y| y.unwrap_or_else(|| y0.clone()))
        .collect();
    let mut y_bar = DVector::zeros(y0.len());
    for (w, y) in sigma.weights.iter().zip(&y_points) {
        y_bar.axpy(*w, y, 1.0);
    }
    Ok(Propagated {
        theta_bar,
        p_pred,
        y_points,
        y_bar,
        failed,
    })
}

#[derive(Debug, Clone)]
pub struct Correction {
    pub gain: DMatrix<f64>,
    pub p_post: DMatrix<f64>,
}

/// Kalman gain and posterior covariance from propagated sigma points and the
/// diagonal output-noise covariance `c_n`.
pub fn measurement_update(
    sigma: &SigmaSet,
    prop: &Propagated,
    c_n: &DVector<f64>,
    max_condition: f64,
) -> Result<Correction, TunerError> {
    let p = prop.theta_bar.len();
    let m = prop.y_bar.len();
    if c_n.len() != m {
        return Err(TunerError::Dimension(format!(
            "C_n has {} entries, h has {m}",
            c_n.len()
        )));
    }
    let mut p_y = DMatrix::from_diagonal(c_n);
    let mut p_ty = DMatrix::zeros(p, m);
    for ((w, th), y) in sigma.weights.iter().zip(&sigma.points).zip(&prop.y_points) {
        let dy = y - &prop.y_bar;
        let dt = th - &prop.theta_bar;
        p_y.ger(*w, &dy, &dy, 1.0);
        p_ty.ger(*w, &dt, &dy, 1.0);
    }
    let chol = p_y
        .clone()
        .cholesky()
        .ok_or(TunerError::IllConditioned(f64::INFINITY))?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| {
        (lo.min(*d), hi.max(*d))
    });
    let cond = (hi / lo).powi(2);
    if !(cond <= max_condition) {
        return Err(TunerError::IllConditioned(cond));
    }
    // K = P_θy P_y⁻¹  ⇔  P_y Kᵀ = P_θyᵀ
    let gain = chol.solve(&p_ty.transpose()).transpose();
    let mut p_post = &prop.p_pred - &gain * p_ty.transpose();
    p_post = (&p_post + p_post.transpose()) * 0.5;
    Ok(Correction { gain, p_post })
}

/// Exponential blend of the output-noise diagonal with the squared slack.
pub fn update_output_noise(
    c_n: &DVector<f64>,
    real_h: &DVector<f64>,
    gamma: f64,
    floor: f64,
) -> DVector<f64> {
    c_n.zip_map(real_h, |c, h| {
        ((1.0 - gamma) * c + gamma * h * h).max(floor)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unbounded(p: usize) -> Bounds {
        Bounds::uniform(p, f64::NEG_INFINITY, f64::INFINITY)
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(p, p) * 0.05
    }

    #[test]
    fn two_parameter_weights() {
        let w = compute_weights(2, 1.0).unwrap();
        assert_eq!(w.len(), 5);
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(w[1..].iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        assert!(compute_weights(2, -2.0).is_err());
    }

    #[test]
    fn weights_sum_exactly_for_small_p() {
        // With λ = 1 every weight is a dyadic or small rational; compare in
        // integer arithmetic: λ + 2p·½ = p + λ.
        for p in 1..=4usize {
            let w = compute_weights(p, 1.0).unwrap();
            let denom = 2 * (p + 1);
            let num: usize = 2 + 2 * p; // w⁰ = 2/denom, each wʲ = 1/denom
            assert_eq!(num, denom);
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(p in 1usize..20, lambda in 0.01f64..10.0) {
            let w = compute_weights(p, lambda).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }

        #[test]
        fn sigma_points_respect_bounds(seed in 0u64..1000, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_spd(&mut rng, p);
            let low = DVector::from_element(p, 0.1);
            let high = DVector::from_element(p, 10.0);
            let bounds = Bounds { low, high };
            let mean = DVector::from_fn(p, |_, _| rng.random_range(0.2..9.9));
            let s = sample_sigma_points(&mean, &cov, 1.0, &bounds).unwrap();
            prop_assert_eq!(&s.points[0], &mean);
            for pt in &s.points {
                prop_assert!(bounds.contains(pt));
            }
            let c0 = (p as f64 + 1.0).sqrt();
            if s.c_used < c0 {
                // Some point sits on a bound (the regularization is tight).
                let touch = s.points.iter().any(|pt| {
                    (0..p).any(|i| (pt[i] - 0.1).abs() < 1e-9 || (pt[i] - 10.0).abs() < 1e-9)
                });
                prop_assert!(touch);
            }
        }
    }

    #[test]
    fn regularize_examples() {
        let b = Bounds::uniform(2, 0.0, 10.0);
        let theta = DVector::from_vec(vec![1.0, 1.0]);
        let c = regularize_step(&theta, &DMatrix::identity(2, 2), &b, 3f64.sqrt());
        assert!((c - 1.0).abs() < 1e-15);
        let c = regularize_step(&theta, &DMatrix::identity(2, 2), &unbounded(2), 3f64.sqrt());
        assert_eq!(c, 3f64.sqrt());
        let edge = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(
            regularize_step(&edge, &DMatrix::identity(2, 2), &b, 1.0),
            0.0
        );
    }

    #[test]
    fn regularize_matches_bisection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = Bounds::uniform(3, 0.1, 5.0);
        for _ in 0..200 {
            let cov = random_spd(&mut rng, 3);
            let a = psd_cholesky(&cov).unwrap();
            let theta = DVector::from_fn(3, |_, _| rng.random_range(0.2..4.9));
            let inside = |c: f64| {
                (0..3).all(|j| {
                    b.contains(&(&theta + a.column(j) * c))
                        && b.contains(&(&theta - a.column(j) * c))
                })
            };
            let c0 = 2.0;
            let (mut lo, mut hi) = (0.0, c0);
            if inside(c0) {
                lo = c0;
            } else {
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
            let c = regularize_step(&theta, &a, &b, c0);
            assert!((c - lo).abs() < 1e-9, "{c} vs {lo}");
        }
    }

    #[test]
    fn zero_covariance_collapses_points() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let s = sample_sigma_points(&mean, &DMatrix::zeros(2, 2), 1.0, &unbounded(2)).unwrap();
        assert!(s.points.iter().all(|p| p == &mean));
        let prop = unscented_transform(&s, |_, t| Some(t * 2.0), &(DMatrix::identity(2, 2) * 0.01))
            .unwrap();
        assert!((&prop.theta_bar - &mean).amax() < 1e-15);
        assert!((&prop.p_pred - DMatrix::identity(2, 2) * 0.01).amax() < 1e-15);
        assert!((&prop.y_bar - &mean * 2.0).amax() < 1e-15);
    }

    #[test]
    fn identity_covariance_points() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let s = sample_sigma_points(&mean, &DMatrix::identity(2, 2), 1.0, &unbounded(2)).unwrap();
        let r3 = 3f64.sqrt();
        assert!((s.points[1][0] - (1.0 + r3)).abs() < 1e-15);
        assert!((s.points[4][1] - (2.0 - r3)).abs() < 1e-15);
    }

    #[test]
    fn sigma_moments_reproduce_belief() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cov = random_spd(&mut rng, 3);
        let mean = DVector::from_vec(vec![5.0, 5.0, 5.0]);
        let b = Bounds::uniform(3, 0.1, 10.0);
        let s = sample_sigma_points(&mean, &cov, 1.0, &b).unwrap();
        let mut m = DVector::zeros(3);
        for (w, p) in s.weights.iter().zip(&s.points) {
            m += p * *w;
        }
        let mut c = DMatrix::zeros(3, 3);
        for (w, p) in s.weights.iter().zip(&s.points) {
            let d = p - &mean;
            c += &d * d.transpose() * *w;
        }
        assert!((&m - &mean).amax() < 1e-12);
        let expect = &cov * (s.c_used * s.c_used / 4.0);
        assert!((&c - &expect).amax() < 1e-12);
    }

    #[test]
    fn linear_rollout_mean_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cov = random_spd(&mut rng, 2);
        let m = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let mean = DVector::from_vec(vec![3.0, 4.0]);
        let s = sample_sigma_points(&mean, &cov, 1.0, &unbounded(2)).unwrap();
        let prop = unscented_transform(&s, |_, t| Some(&m * t), &DMatrix::zeros(2, 2)).unwrap();
        assert!((&prop.y_bar - &m * &prop.theta_bar).amax() < 1e-12);
    }

    #[test]
    fn quadratic_rollout_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_spd(&mut rng, 2);
        let mean = DVector::from_vec(vec![1.0, -0.5]);
        let f = |t: &DVector<f64>| t[0] * t[0] + 0.5 * t[0] * t[1] + 2.0 * t[1] * t[1];
        let s = sample_sigma_points(&mean, &cov, 1.0, &unbounded(2)).unwrap();
        let prop = unscented_transform(
            &s,
            |_, t| Some(DVector::from_element(1, f(t))),
            &DMatrix::zeros(2, 2),
        )
        .unwrap();

        // The points encode N(θ, c²/(p+λ)·P).
        let spread = &cov * (s.c_used * s.c_used / 3.0);
        let l = spread.cholesky().unwrap().l();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let v = f(&(&mean + &l * z));
            sum += v;
            sq += v * v;
        }
        let mc = sum / n as f64;
        let se = ((sq / n as f64 - mc * mc) / n as f64).sqrt();
        assert!(
            (prop.y_bar[0] - mc).abs() < 3.0 * se,
            "{} vs {mc} ± {se}",
            prop.y_bar[0]
        );
    }

    #[test]
    fn failed_rollouts_replaced_or_abort() {
        let mean = DVector::from_vec(vec![1.0, 1.0]);
        let s = sample_sigma_points(&mean, &(DMatrix::identity(2, 2) * 0.01), 1.0, &unbounded(2))
            .unwrap();
        let prop = unscented_transform(
            &s,
            |j, t| if j == 3 { None } else { Some(t.clone()) },
            &DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert_eq!(prop.failed, vec![3]);
        assert_eq!(prop.y_points[3], mean);
        let err = unscented_transform(
            &s,
            |j, t| if j >= 3 { None } else { Some(t.clone()) },
            &DMatrix::zeros(2, 2),
        );
        assert!(matches!(
            err,
            Err(TunerError::RolloutsFailed {
                failed: 2,
                limit: 1
            })
        ));
    }

    #[test]
    fn identical_outputs_give_zero_gain() {
        let mean = DVector::from_vec(vec![1.0, 1.0]);
        let s = sample_sigma_points(&mean, &DMatrix::identity(2, 2), 1.0, &unbounded(2)).unwrap();
        let prop = unscented_transform(
            &s,
            |_, _| Some(DVector::from_element(3, 2.0)),
            &DMatrix::zeros(2, 2),
        )
        .unwrap();
        let c = measurement_update(&s, &prop, &DVector::from_element(3, 1.0), 1e12).unwrap();
        assert!(c.gain.amax() < 1e-15);
        assert!((&c.p_post - &prop.p_pred).amax() < 1e-15);
    }

    #[test]
    fn scalar_gain_matches_hand_computation() {
        // p = 1, λ = 1, P = σ², one output y = aθ: the points are θ ± √2σ.
        let (sigma2, a, r) = (0.25, 3.0, 0.5);
        let mean = DVector::from_element(1, 2.0);
        let s = sample_sigma_points(
            &mean,
            &DMatrix::from_element(1, 1, sigma2),
            1.0,
            &unbounded(1),
        )
        .unwrap();
        let prop = unscented_transform(&s, |_, t| Some(t * a), &DMatrix::zeros(1, 1)).unwrap();
        let c = measurement_update(&s, &prop, &DVector::from_element(1, r), 1e12).unwrap();
        let k = a * sigma2 / (a * a * sigma2 + r);
        assert!((c.gain[(0, 0)] - k).abs() < 1e-14);
        assert!((c.p_post[(0, 0)] - (sigma2 - k * a * sigma2)).abs() < 1e-14);
    }

    #[test]
    fn posterior_is_below_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let cov = random_spd(&mut rng, 3);
            let m = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-2.0..2.0));
            let mean = DVector::from_element(3, 0.0);
            let s = sample_sigma_points(&mean, &cov, 1.0, &unbounded(3)).unwrap();
            let prop = unscented_transform(
                &s,
                |_, t| Some((&m * t).map(|v| v + 0.1 * v * v)),
                &(DMatrix::identity(3, 3) * 1e-3),
            )
            .unwrap();
            let c = measurement_update(&s, &prop, &DVector::from_element(6, 0.3), 1e12).unwrap();
            let diff = &prop.p_pred - &c.p_post;
            let min_eig = diff.symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-10, "{min_eig}");
        }
    }

    #[test]
    fn larger_output_noise_shrinks_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cov = random_spd(&mut rng, 2);
        let m = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let s = sample_sigma_points(&mean, &cov, 1.0, &unbounded(2)).unwrap();
        let prop = unscented_transform(&s, |_, t| Some(&m * t), &DMatrix::zeros(2, 2)).unwrap();
        let cn = DVector::from_element(5, 0.2);
        let k1 = measurement_update(&s, &prop, &cn, 1e12)
            .unwrap()
            .gain
            .norm();
        let k2 = measurement_update(&s, &prop, &(cn * 100.0), 1e12)
            .unwrap()
            .gain
            .norm();
        assert!(k2 < k1);
    }

    #[test]
    fn output_noise_blend() {
        let c = DVector::from_element(3, 4.0);
        let z = DVector::zeros(3);
        let once = update_output_noise(&c, &z, 0.3, 0.0);
        assert!((once[0] - 2.8).abs() < 1e-15);
        assert_eq!(
            update_output_noise(&c, &DVector::from_element(3, 7.0), 0.0, 0.0),
            c
        );
        let h = DVector::from_element(3, 1.5);
        let mut cn = c.clone();
        for _ in 0..200 {
            cn = update_output_noise(&cn, &h, 0.3, 0.0);
        }
        assert!((cn[1] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn psd_cholesky_handles_rank_deficiency() {
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let p = &v * v.transpose();
        let l = psd_cholesky(&p).unwrap();
        assert!((&l * l.transpose() - &p).amax() < 1e-12);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(psd_cholesky(&bad).is_none());
        let fixed = repair_psd(&bad, 1e-10);
        assert!(psd_cholesky(&fixed).is_some());
    }
}
