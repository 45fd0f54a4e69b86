//! Privacy accounting for the shuffled Gaussian mechanism.
//!
//! Per-step guarantees come from the worst-case shuffled-Gaussian condition
//! (noise std `sigma * c`, per-sample sensitivity `c`, batch-gradient norm
//! bound `c_prime`, `d` shuffled coordinates). Steps are composed with the
//! advanced composition theorem after amplification by subsampling, and
//! `solve_sigma` inverts the whole pipeline for a total budget.
//!
//! The shuffled condition is an approximation built on the Fenton–Wilkinson
//! moment match; it is evaluated as stated and not re-derived here.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lognormal::std_normal_cdf;
use crate::stats::{ln_expm1, softplus};

/// An `(epsilon, delta)` privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub epsilon: f64,
    pub delta: f64,
}

impl Budget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Parameters of one (repeated) shuffled Gaussian invocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    /// Noise multiplier; the noise std is `sigma * c`.
    pub sigma: f64,
    /// Per-sample clip, i.e. the l2 sensitivity.
    pub c: f64,
    /// Bound on the l2 norm of the released statistic.
    pub c_prime: f64,
    /// Number of shuffled coordinates.
    pub d: u64,
    /// Sampling rate `|B| / N`.
    pub p: f64,
    pub steps: u64,
}

impl MechanismSpec {
    /// Single invocation without subsampling.
    pub fn single(sigma: f64, c: f64, c_prime: f64, d: u64) -> Self {
        Self { sigma, c, c_prime, d, p: 1.0, steps: 1 }
    }

    pub fn with_sigma(self, sigma: f64) -> Self {
        Self { sigma, ..self }
    }

    pub fn validate(&self, shuffled: bool) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("c", self.c), ("c_prime", self.c_prime)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::domain(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::domain(format!("sampling rate must lie in (0, 1], got {}", self.p)));
        }
        if self.steps == 0 {
            return Err(Error::domain("steps must be >= 1"));
        }
        let min_d = if shuffled { 2 } else { 1 };
        if self.d < min_d {
            return Err(Error::domain(format!("d must be >= {min_d}, got {}", self.d)));
        }
        Ok(())
    }

    /// `c^2 / (sigma c)^2`, the log-scale variance of each lognormal summand.
    pub fn lognormal_variance(&self) -> f64 {
        1.0 / (self.sigma * self.sigma)
    }
}

/// Worst-case constants of the shuffled-Gaussian condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleBound {
    pub zeta1: f64,
    pub zeta2: f64,
    pub sigma_z1_sq: f64,
    pub sigma_z2_sq: f64,
}

impl ShuffleBound {
    pub fn sigma_z1(&self) -> f64 {
        self.sigma_z1_sq.sqrt()
    }

    pub fn sigma_z2(&self) -> f64 {
        self.sigma_z2_sq.sqrt()
    }
}

/// Evaluates `zeta1, zeta2, sigma_Z1^2, sigma_Z2^2` at the extremal
/// configuration: `k = d` permutations, `f` and `g` of the form
/// `[(d-1), -1, ..., -1]` scaled to norms `c_prime` and `c`.
pub fn shuffle_bound(spec: &MechanismSpec) -> Result<ShuffleBound> {
    if spec.d < 2 {
        return Err(Error::domain(format!("shuffle bound needs d >= 2, got {}", spec.d)));
    }
    for v in [spec.sigma, spec.c, spec.c_prime] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::domain("sigma, c and c_prime must be finite and > 0"));
        }
    }
    let d = spec.d as f64;
    let noise_var = (spec.sigma * spec.c).powi(2);
    let q = spec.c * spec.c / noise_var;
    let ratio = d / (d - 1.0);
    let a1 = ratio * spec.c * spec.c_prime / noise_var;
    let a2 = ratio * spec.c * (spec.c + spec.c_prime) / noise_var;
    let ln_dm1 = (d - 1.0).ln();
    // ln(1 + (d-1) e^{-a})
    let spread = |a: f64| softplus(ln_dm1 - a);
    // ln[ (1 + (d-1)e^{-2a}) / (1 + (d-1)e^{-a})^2 * (e^q - 1) + 1 ]
    let variance = |a: f64| softplus(spread(2.0 * a) - 2.0 * spread(a) + ln_expm1(q));
    Ok(ShuffleBound {
        zeta1: -spread(a1),
        zeta2: -spread(a2) - q,
        sigma_z1_sq: variance(a1),
        sigma_z2_sq: variance(a2),
    })
}

/// Smallest `delta` certified by the shuffled-Gaussian condition at `epsilon`
/// for one invocation.
pub fn shuffled_delta(spec: &MechanismSpec, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let b = shuffle_bound(spec)?;
    let (s1, s2) = (b.sigma_z1(), b.sigma_z2());
    let first = std_normal_cdf(s1 / 2.0 + (b.zeta1 - epsilon) / s1);
    let second = std_normal_cdf(s2 / 2.0 + (b.zeta2 - epsilon) / s2);
    let second = if second == 0.0 { 0.0 } else { epsilon.exp() * second };
    Ok((first - second).max(0.0))
}

/// Tight `delta(epsilon)` of the plain Gaussian mechanism with sensitivity
/// `c` and noise std `sigma * c`:
///
/// `Phi(1/(2 sigma) - eps sigma) - e^eps Phi(-1/(2 sigma) - eps sigma)`.
pub fn gaussian_delta(sigma: f64, c: f64, epsilon: f64) -> Result<f64> {
    if !(sigma > 0.0) || !(c > 0.0) || !sigma.is_finite() || !c.is_finite() {
        return Err(Error::domain(format!("sigma and c must be > 0, got ({sigma}, {c})")));
    }
    if !(epsilon >= 0.0) {
        return Err(Error::domain(format!("epsilon must be >= 0, got {epsilon}")));
    }
    // the ratio sensitivity / std is 1 / sigma independent of c
    let r = 1.0 / sigma;
    let first = std_normal_cdf(r / 2.0 - epsilon / r);
    let second = std_normal_cdf(-r / 2.0 - epsilon / r);
    let second = if second == 0.0 { 0.0 } else { epsilon.exp() * second };
    Ok((first - second).max(0.0))
}

fn check_rate(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("sampling rate must lie in (0, 1], got {p}")))
    }
}

/// Privacy of the mechanism run on a Poisson subsample with rate `p`.
pub fn amplify_by_subsampling(budget: Budget, p: f64) -> Result<Budget> {
    check_rate(p)?;
    Ok(Budget {
        epsilon: (p * budget.epsilon.exp_m1()).ln_1p(),
        delta: p * budget.delta,
    })
}

/// Inverse of the epsilon map in [`amplify_by_subsampling`].
pub fn invert_amplification(amplified_eps: f64, p: f64) -> Result<f64> {
    check_rate(p)?;
    if !(amplified_eps >= 0.0) {
        return Err(Error::domain(format!("epsilon must be >= 0, got {amplified_eps}")));
    }
    Ok((amplified_eps.exp_m1() / p).ln_1p())
}

/// Epsilon of `k` identical `(eps_j, .)` steps under advanced composition.
pub fn advanced_epsilon(eps_j: f64, k: u64, delta_slack: f64) -> f64 {
    let k = k as f64;
    let linear = k * eps_j;
    let sq = k * eps_j * eps_j;
    let adv = 0.5 * sq + (2.0 * (1.0 / delta_slack).ln() * sq).sqrt();
    linear.min(adv)
}

/// Composes `k` identical per-step budgets with slack `delta_slack`.
pub fn compose_advanced(per_step: Budget, k: u64, delta_slack: f64) -> Result<Budget> {
    if k == 0 {
        return Err(Error::domain("composition needs k >= 1"));
    }
    if !(delta_slack > 0.0 && delta_slack < 1.0) {
        return Err(Error::domain(format!("delta slack must lie in (0, 1), got {delta_slack}")));
    }
    let delta = k as f64 * per_step.delta + delta_slack;
    if delta >= 1.0 {
        return Err(Error::domain(format!("composed delta {delta} is not below 1")));
    }
    Ok(Budget {
        epsilon: advanced_epsilon(per_step.epsilon, k, delta_slack),
        delta,
    })
}

/// `true` when the shuffled noise is strictly smaller than the plain one,
/// i.e. the shuffling path is worth taking.
pub fn fallback_check(sigma: f64, sigma0: f64) -> bool {
    sigma < sigma0
}

/// Knobs of the accounting pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccountantConfig {
    /// Fraction of the total delta reserved as composition slack.
    pub slack_fraction: f64,
    /// Absolute tolerance when solving for the per-step epsilon.
    pub eps_tol: f64,
    /// Relative tolerance of the sigma bisection.
    pub sigma_rel_tol: f64,
    pub sigma_lo: f64,
    pub sigma_hi_max: f64,
    /// Warn when the lognormal variance `1/sigma^2` exceeds this value.
    pub fw_warn_variance: f64,
}

impl Default for AccountantConfig {
    fn default() -> Self {
        Self {
            slack_fraction: 0.5,
            eps_tol: 1e-9,
            sigma_rel_tol: 1e-6,
            sigma_lo: 1e-4,
            sigma_hi_max: 1e6,
            fw_warn_variance: 4.0,
        }
    }
}

/// Intermediate quantities of a [`solve_sigma`] run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSolution {
    pub sigma: f64,
    /// Per-step budget after amplification, as fed to composition.
    pub per_step: Budget,
    /// Per-invocation budget the mechanism itself must meet.
    pub per_invocation: Budget,
    pub delta_slack: f64,
    pub shuffled: bool,
}

/// Noise multiplier required for `steps` subsampled steps to meet `total`.
#[allow(clippy::too_many_arguments)]
pub fn solve_sigma(
    total: Budget,
    c: f64,
    c_prime: f64,
    d: u64,
    p: f64,
    steps: u64,
    shuffled: bool,
) -> Result<f64> {
    let spec = MechanismSpec { sigma: 1.0, c, c_prime, d, p, steps };
    solve_sigma_with(total, &spec, shuffled, &AccountantConfig::default()).map(|s| s.sigma)
}

/// [`solve_sigma`] with explicit configuration; `spec.sigma` is ignored.
pub fn solve_sigma_with(
    total: Budget,
    spec: &MechanismSpec,
    shuffled: bool,
    cfg: &AccountantConfig,
) -> Result<SigmaSolution> {
    let total = Budget::new(total.epsilon, total.delta)?;
    spec.validate(shuffled)?;
    if !(cfg.slack_fraction > 0.0 && cfg.slack_fraction < 1.0) {
        return Err(Error::Config(format!("slack_fraction must lie in (0, 1), got {}", cfg.slack_fraction)));
    }
    let steps = spec.steps;
    let delta_slack = total.delta * cfg.slack_fraction;
    let delta_j = total.delta * (1.0 - cfg.slack_fraction) / steps as f64;

    // largest per-step epsilon whose composition stays within the total
    let (mut lo, mut hi) = (0.0, total.epsilon);
    while hi - lo > cfg.eps_tol * 1e-3 {
        let mid = 0.5 * (lo + hi);
        if advanced_epsilon(mid, steps, delta_slack) <= total.epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let per_step = Budget { epsilon: lo, delta: delta_j };
    let eps_s = invert_amplification(per_step.epsilon, spec.p)?;
    let delta_s = delta_j / spec.p;
    if delta_s >= 1.0 {
        return Err(Error::Infeasible(format!("per-invocation delta {delta_s} is not below 1")));
    }
    let per_invocation = Budget { epsilon: eps_s, delta: delta_s };
    let sigma = calibrate_sigma(spec, per_invocation, shuffled, cfg)?;
    if shuffled && 1.0 / (sigma * sigma) > cfg.fw_warn_variance {
        warn!(
            "lognormal variance 1/sigma^2 = {:.3} exceeds {}; the Fenton-Wilkinson step is inaccurate here",
            1.0 / (sigma * sigma),
            cfg.fw_warn_variance
        );
    }
    Ok(SigmaSolution { sigma, per_step, per_invocation, delta_slack, shuffled })
}

/// Per-invocation delta at `eps` for noise multiplier `sigma`.
pub fn invocation_delta(spec: &MechanismSpec, sigma: f64, eps: f64, shuffled: bool) -> Result<f64> {
    if shuffled {
        shuffled_delta(&spec.with_sigma(sigma), eps)
    } else {
        gaussian_delta(sigma, spec.c, eps)
    }
}

/// Smallest sigma with `delta(target.epsilon) <= target.delta` for a single
/// invocation. Relies on delta being non-increasing in sigma.
pub fn calibrate_sigma(
    spec: &MechanismSpec,
    target: Budget,
    shuffled: bool,
    cfg: &AccountantConfig,
) -> Result<f64> {
    let passes = |s: f64| -> Result<bool> {
        Ok(invocation_delta(spec, s, target.epsilon, shuffled)? <= target.delta)
    };
    let mut hi = 1.0;
    while !passes(hi)? {
        hi *= 2.0;
        if hi > cfg.sigma_hi_max {
            return Err(Error::Infeasible(format!(
                "no sigma <= {} meets delta {} at epsilon {}",
                cfg.sigma_hi_max, target.delta, target.epsilon
            )));
        }
    }
    let mut lo = cfg.sigma_lo.min(hi);
    if passes(lo)? {
        return Ok(lo);
    }
    while (hi - lo) > cfg.sigma_rel_tol * 1e-2 * hi {
        let mid = 0.5 * (lo + hi);
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Smallest epsilon at which one invocation with multiplier `spec.sigma`
/// meets `delta`, found by bisection to `tol`.
pub fn certified_epsilon(spec: &MechanismSpec, delta: f64, shuffled: bool, tol: f64) -> Result<f64> {
    spec.validate(shuffled)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let passes = |e: f64| -> Result<bool> { Ok(invocation_delta(spec, spec.sigma, e, shuffled)? <= delta) };
    if passes(0.0)? {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while !passes(hi)? {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::Infeasible(format!("no epsilon <= 1e4 reaches delta {delta} at sigma {}", spec.sigma)));
        }
    }
    let mut lo = 0.0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if passes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
