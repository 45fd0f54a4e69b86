//! One-step privacy audit with a Dirac canary.
//!
//! The canary is a gradient that is zero everywhere except `c` at one
//! coordinate. Each trial releases the noisy (and optionally shuffled)
//! statistic once with the canary and once without it; a threshold test on
//! the released vector then yields type I/II error rates and an empirical
//! epsilon.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{certified_epsilon, MechanismSpec};
use crate::error::{Error, Result};
use crate::rng::{chunk_stream, Stream};
use crate::stats::ks_two_sample;

/// Error rates below this are too noisy to use.
pub const MIN_ERROR_RATE: f64 = 4e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanaryObservations {
    /// Test statistic with the canary in the batch.
    pub present: Vec<f64>,
    pub absent: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditOutcome {
    /// Type I error: canary absent, test says present.
    pub alpha: f64,
    /// Type II error: canary present, test says absent.
    pub beta: f64,
    pub delta: f64,
    pub eps_empirical: f64,
    pub trials: usize,
    pub threshold: f64,
    /// True when an error rate fell below [`MIN_ERROR_RATE`] and was floored.
    pub clamped: bool,
}

/// `max{ln((1-a-d)/b), ln((1-b-d)/a), 0}`.
pub fn epsilon_from_errors(alpha: f64, beta: f64, delta: f64) -> f64 {
    let one = ((1.0 - alpha - delta) / beta).ln();
    let two = ((1.0 - beta - delta) / alpha).ln();
    [one, two, 0.0].into_iter().filter(|v| !v.is_nan()).fold(0.0, f64::max)
}

/// Simulates `n_trials` paired releases. With `shuffle`, the released
/// vector is permuted uniformly and the statistic is the maximum over the
/// canary's orbit (all `d` coordinates); otherwise it is the canary
/// coordinate itself.
pub fn dirac_canary_trials(spec: &MechanismSpec, n_trials: usize, shuffle: bool, seed: u64) -> Result<CanaryObservations> {
    if n_trials < 1000 {
        return Err(Error::domain(format!("at least 1000 trials are needed, got {n_trials}")));
    }
    if !(spec.sigma >= 0.0 && spec.c > 0.0 && spec.d >= 1) {
        return Err(Error::domain("audit needs sigma >= 0, c > 0 and d >= 1"));
    }
    let d = usize::try_from(spec.d).map_err(|_| Error::domain("d too large"))?;
    let std = spec.sigma * spec.c;
    let canary = spec.c.min(spec.c_prime);
    let pairs: Vec<(f64, f64)> = (0..n_trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = chunk_stream(seed, Stream::Audit, t as u64);
            let mut release = |with_canary: bool| -> f64 {
                let bump = if with_canary { canary } else { 0.0 };
                if !shuffle {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    return bump + std * z;
                }
                // The orbit maximum is the same for every permutation, so the
                // permuted vector never needs to be materialised.
                let mut draw = || {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                };
                let first = bump + draw();
                (1..d).fold(first, |m, _| m.max(draw()))
            };
            let present = release(true);
            let absent = release(false);
            (present, absent)
        })
        .collect();
    let (present, absent) = pairs.into_iter().unzip();
    Ok(CanaryObservations { present, absent })
}

fn count_above(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&x| x <= t)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Audit at a single threshold: "present" when the score exceeds it.
pub fn empirical_epsilon(present: &[f64], absent: &[f64], delta: f64, threshold: f64) -> Result<AuditOutcome> {
    if present.is_empty() || absent.is_empty() {
        return Err(Error::domain("both score sets must be non-empty"));
    }
    if !(delta >= 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta must lie in [0, 1), got {delta}")));
    }
    let alpha = absent.iter().filter(|&&x| x > threshold).count() as f64 / absent.len() as f64;
    let beta = present.iter().filter(|&&x| x <= threshold).count() as f64 / present.len() as f64;
    Ok(outcome(alpha, beta, delta, threshold, present.len().min(absent.len())))
}

fn outcome(alpha: f64, beta: f64, delta: f64, threshold: f64, trials: usize) -> AuditOutcome {
    let clamped = alpha < MIN_ERROR_RATE || beta < MIN_ERROR_RATE;
    let (a, b) = (alpha.max(MIN_ERROR_RATE), beta.max(MIN_ERROR_RATE));
    AuditOutcome { alpha, beta, delta, eps_empirical: epsilon_from_errors(a, b, delta), trials, threshold, clamped }
}

/// Largest epsilon over all thresholds whose error rates both reach
/// [`MIN_ERROR_RATE`]. If no threshold qualifies, the best clamped outcome is
/// returned with `clamped` set.
pub fn audit_sweep(present: &[f64], absent: &[f64], delta: f64) -> Result<AuditOutcome> {
    if present.is_empty() || absent.is_empty() {
        return Err(Error::domain("both score sets must be non-empty"));
    }
    let (p, a) = (sorted(present), sorted(absent));
    let trials = p.len().min(a.len());
    let mut best: Option<AuditOutcome> = None;
    let mut best_clamped: Option<AuditOutcome> = None;
    for &t in p.iter().chain(&a) {
        let alpha = count_above(&a, t) as f64 / a.len() as f64;
        let beta = (p.len() - count_above(&p, t)) as f64 / p.len() as f64;
        let o = outcome(alpha, beta, delta, t, trials);
        let slot = if o.clamped { &mut best_clamped } else { &mut best };
        if slot.is_none_or(|b| o.eps_empirical > b.eps_empirical) {
            *slot = Some(o);
        }
    }
    Ok(best.or(best_clamped).expect("at least one threshold"))
}

/// Percentile bootstrap interval of the swept epsilon.
pub fn bootstrap_epsilon(obs: &CanaryObservations, delta: f64, reps: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if reps < 10 || !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("bootstrap needs reps >= 10 and level in (0, 1)"));
    }
    let mut eps: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = chunk_stream(seed, Stream::Audit, (1 << 32) + r as u64);
            let resample = |v: &[f64], rng: &mut crate::rng::Rng| -> Vec<f64> {
                (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).collect()
            };
            let p = resample(&obs.present, &mut rng);
            let a = resample(&obs.absent, &mut rng);
            audit_sweep(&p, &a, delta).map(|o| o.eps_empirical)
        })
        .collect::<Result<_>>()?;
    eps.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((crate::stats::quantile(&eps, tail), crate::stats::quantile(&eps, 1.0 - tail)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub sigma: f64,
    pub c: f64,
    pub c_prime: f64,
    pub d: u64,
    pub delta: f64,
    pub shuffle: bool,
    /// Epsilon certified by the accountant for this sigma and delta.
    pub eps_theoretical: f64,
    pub outcome: AuditOutcome,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

/// Runs the canary trials, the threshold sweep, a bootstrap interval and a
/// two-sample KS test for one mechanism.
pub fn run_audit(
    spec: &MechanismSpec,
    delta: f64,
    n_trials: usize,
    shuffle: bool,
    bootstrap_reps: usize,
    seed: u64,
) -> Result<AuditReport> {
    let eps_theoretical = certified_epsilon(spec, delta, shuffle && spec.d >= 2, 1e-9)?;
    let obs = dirac_canary_trials(spec, n_trials, shuffle, seed)?;
    let outcome = audit_sweep(&obs.present, &obs.absent, delta)?;
    let level = 0.99;
    let (ci_low, ci_high) = bootstrap_epsilon(&obs, delta, bootstrap_reps, level, seed)?;
    let (ks_statistic, ks_p_value) = ks_two_sample(&obs.present, &obs.absent);
    Ok(AuditReport {
        sigma: spec.sigma,
        c: spec.c,
        c_prime: spec.c_prime,
        d: spec.d,
        delta,
        shuffle,
        eps_theoretical,
        outcome,
        ci_low,
        ci_high,
        ci_level: level,
        ks_statistic,
        ks_p_value,
    })
}
