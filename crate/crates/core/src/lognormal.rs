//! Fenton–Wilkinson moment matching for sums of lognormal variables, the
//! standard normal CDF, and a seeded Monte-Carlo reference for the sum.

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{chunk_stream, Stream};
use crate::stats::{ln_expm1, log_sum_exp, softplus};

/// Log-scale parameters of one normal summand, `Y ~ N(mu, sigma2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mu: f64,
    pub sigma2: f64,
}

impl NormalParams {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(Error::domain(format!(
                "normal params need finite mu and sigma2 > 0, got ({mu}, {sigma2})"
            )));
        }
        Ok(Self { mu, sigma2 })
    }
}

/// Single lognormal `e^Y`, `Y ~ N(mu_y, sigma2_y)`, standing in for a sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalSumApprox {
    pub mu_y: f64,
    pub sigma2_y: f64,
}

impl LognormalSumApprox {
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        std_normal_cdf((x.ln() - self.mu_y) / self.sigma2_y.sqrt())
    }

    pub fn mean(&self) -> f64 {
        (self.mu_y + self.sigma2_y / 2.0).exp()
    }
}

/// Fenton–Wilkinson approximation of `Σ_i e^{Y_i}` with `Y_i ~ N(mus[i], sigma2)`.
///
/// Both moment sums are evaluated with log-sum-exp, so `mus` may be far
/// outside the range where `e^mu` is representable.
pub fn fw_approx(mus: &[f64], sigma2: f64) -> Result<LognormalSumApprox> {
    if mus.is_empty() {
        return Err(Error::domain("fw_approx needs at least one summand"));
    }
    if !sigma2.is_finite() || sigma2 <= 0.0 {
        return Err(Error::domain(format!("sigma2 must be finite and > 0, got {sigma2}")));
    }
    if let Some(bad) = mus.iter().find(|m| !m.is_finite()) {
        return Err(Error::domain(format!("non-finite mu {bad}")));
    }
    let lse1 = log_sum_exp(mus);
    let doubled: Vec<f64> = mus.iter().map(|m| 2.0 * m).collect();
    let lse2 = log_sum_exp(&doubled);
    // ln[(e^s - 1) Σe^{2μ} / (Σe^μ)^2], then σ_Y² = ln(1 + e^that)
    let log_term = ln_expm1(sigma2) + lse2 - 2.0 * lse1;
    let sigma2_y = softplus(log_term);
    let mu_y = lse1 + sigma2 / 2.0 - sigma2_y / 2.0;
    Ok(LognormalSumApprox { mu_y, sigma2_y })
}

const MC_CHUNK: usize = 256;

/// Sorted Monte-Carlo samples of `Σ_i e^{Y_i}`, `Y_i ~ N(mus[i], sigma2)`.
///
/// Draws are generated in fixed-size chunks, each with its own keystream
/// position, so the output is identical for any thread count.
pub fn mc_sum_cdf(mus: &[f64], sigma2: f64, n_draws: usize, seed: u64) -> Result<Vec<f64>> {
    if n_draws < 1000 {
        return Err(Error::domain(format!("n_draws must be >= 1000, got {n_draws}")));
    }
    if mus.is_empty() || !sigma2.is_finite() || sigma2 <= 0.0 || mus.iter().any(|m| !m.is_finite()) {
        return Err(Error::domain("mc_sum_cdf needs non-empty finite mus and sigma2 > 0"));
    }
    let sd = sigma2.sqrt();
    let n_chunks = n_draws.div_ceil(MC_CHUNK);
    let mut samples: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|chunk| {
            let mut rng = chunk_stream(seed, Stream::MonteCarlo, chunk as u64);
            let len = MC_CHUNK.min(n_draws - chunk * MC_CHUNK);
            (0..len)
                .map(|_| {
                    mus.iter()
                        .map(|&mu| {
                            let z: f64 = rng.sample(StandardNormal);
                            (mu + sd * z).exp()
                        })
                        .sum::<f64>()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    Ok(samples)
}

/// Standard normal CDF via the complementary error function.
pub fn std_normal_cdf(x: f64) -> f64 {
    use libm::erfc;
    if x < 0.0 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    } else {
        1.0 - 0.5 * erfc(x / std::f64::consts::SQRT_2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::ks_distance;
    use proptest::prelude::*;

    /// Marsaglia's Taylor series, independent of erfc.
    fn phi_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(1e-300) {
            k += 2.0;
            term *= x * x / k;
            sum += term;
        }
        0.5 + sum * (-0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()).exp()
    }

    #[test]
    fn phi_reference_points() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!(std_normal_cdf(-40.0) < 1e-300);
        assert_eq!(std_normal_cdf(40.0), 1.0);
    }

    #[test]
    fn phi_matches_series_oracle() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            let err = (std_normal_cdf(x) - phi_series(x)).abs();
            assert!(err <= 1e-12, "x={x} err={err}");
            let sym = (std_normal_cdf(-x) - (1.0 - std_normal_cdf(x))).abs();
            assert!(sym <= 1e-15, "symmetry at {x}: {sym}");
        }
    }

    #[test]
    fn single_summand_collapses() {
        let a = fw_approx(&[0.7], 0.3).unwrap();
        assert!((a.sigma2_y - 0.3).abs() < 1e-14);
        assert!((a.mu_y - 0.7).abs() < 1e-14);
    }

    #[test]
    fn symmetric_pair() {
        let s: f64 = 0.4;
        let a = fw_approx(&[0.0, 0.0], s).unwrap();
        let want = ((s.exp() - 1.0) / 2.0 + 1.0).ln();
        assert!((a.sigma2_y - want).abs() < 1e-14);
        assert!((a.mu_y - (2f64.ln() + s / 2.0 - want / 2.0)).abs() < 1e-14);
    }

    #[test]
    fn huge_locations_do_not_overflow() {
        let a = fw_approx(&[5000.0, 5000.0, -5000.0], 2.0).unwrap();
        assert!(a.mu_y.is_finite() && a.sigma2_y.is_finite());
        let b = fw_approx(&[0.0; 4], 900.0).unwrap();
        assert!(b.sigma2_y.is_finite() && b.sigma2_y <= 900.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(fw_approx(&[], 1.0).is_err());
        assert!(fw_approx(&[0.0], 0.0).is_err());
        assert!(fw_approx(&[f64::NAN], 1.0).is_err());
        assert!(mc_sum_cdf(&[0.0], 1.0, 999, 0).is_err());
        assert!(NormalParams::new(0.0, -1.0).is_err());
    }

    #[test]
    fn mc_degenerate_variance() {
        let s = mc_sum_cdf(&[0.0], 1e-12, 1000, 3).unwrap();
        assert!(s.iter().all(|x| (x - 1.0).abs() < 1e-4));
    }

    #[test]
    fn mc_mean_matches_analytic() {
        let s = mc_sum_cdf(&[0.0, 0.0], 0.25, 20_000, 11).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let want = 2.0 * 0.125f64.exp();
        assert!((mean / want - 1.0).abs() < 0.02, "mean {mean} vs {want}");
    }

    #[test]
    fn mc_is_deterministic_and_sorted() {
        let a = mc_sum_cdf(&[0.1, -0.3, 0.0], 0.5, 3000, 5).unwrap();
        let b = mc_sum_cdf(&[0.1, -0.3, 0.0], 0.5, 3000, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ks_shrinks_with_variance() {
        let mus = vec![0.0; 20];
        let ks = |s2: f64| {
            let fw = fw_approx(&mus, s2).unwrap();
            let mc = mc_sum_cdf(&mus, s2, 20_000, 9).unwrap();
            ks_distance(&mc, |x| fw.cdf(x))
        };
        let hi = ks(4.0);
        let lo = ks(0.25);
        assert!(lo < hi, "low-variance KS {lo} should beat high-variance {hi}");
    }

    #[test]
    fn sigma2_y_increasing_in_sigma2() {
        let mus = [0.3, -1.0, 2.0, 0.0];
        let mut prev = 0.0;
        for i in 1..200 {
            let v = fw_approx(&mus, i as f64 * 0.05).unwrap().sigma2_y;
            assert!(v > prev);
            prev = v;
        }
    }

    proptest! {
        #[test]
        fn shift_equivariance(mus in prop::collection::vec(-5.0f64..5.0, 1..20),
                              s2 in 0.01f64..5.0, kappa in -50.0f64..50.0) {
            let a = fw_approx(&mus, s2).unwrap();
            let shifted: Vec<f64> = mus.iter().map(|m| m + kappa).collect();
            let b = fw_approx(&shifted, s2).unwrap();
            prop_assert!((b.mu_y - a.mu_y - kappa).abs() < 1e-9);
            prop_assert!((b.sigma2_y - a.sigma2_y).abs() < 1e-9 * a.sigma2_y.max(1.0));
        }

        #[test]
        fn order_symmetry(mut mus in prop::collection::vec(-5.0f64..5.0, 2..20), s2 in 0.01f64..5.0) {
            let a = fw_approx(&mus, s2).unwrap();
            mus.reverse();
            let b = fw_approx(&mus, s2).unwrap();
            prop_assert!((a.mu_y - b.mu_y).abs() < 1e-12);
            prop_assert!((a.sigma2_y - b.sigma2_y).abs() < 1e-12);
        }

        #[test]
        fn equal_locations_shrink_variance(d in 1usize..200, s2 in 0.01f64..8.0, mu in -3.0f64..3.0) {
            let a = fw_approx(&vec![mu; d], s2).unwrap();
            prop_assert!(a.sigma2_y > 0.0);
            prop_assert!(a.sigma2_y <= s2 * (1.0 + 1e-12));
        }
    }
}
