use proptest::prelude::*;
use rand::Rng as _;
use shufdp::accountant::{calibrate_sigma, AccountantConfig, Budget, MechanismSpec};
use shufdp::audit::{audit_sweep, dirac_canary_trials, run_audit};
use shufdp::rng::{stream, Stream};

#[test]
fn shuffling_never_helps_the_attacker() {
    for (sigma, d) in [(0.5, 100u64), (1.0, 1000), (2.0, 50)] {
        let spec = MechanismSpec::single(sigma, 1.0, 1.0, d);
        let plain = dirac_canary_trials(&spec, 4000, false, 9).unwrap();
        let shuffled = dirac_canary_trials(&spec, 4000, true, 9).unwrap();
        let e_plain = audit_sweep(&plain.present, &plain.absent, 1e-5).unwrap().eps_empirical;
        let e_shuf = audit_sweep(&shuffled.present, &shuffled.absent, 1e-5).unwrap().eps_empirical;
        assert!(e_shuf <= e_plain, "sigma {sigma}, d {d}: shuffled {e_shuf} > plain {e_plain}");
    }
}

/// Audited epsilon must stay below the certified one over random toy configs.
#[test]
fn audited_epsilon_is_a_lower_bound() {
    let mut rng = stream(21, Stream::Audit);
    let mut violations = Vec::new();
    for i in 0..20 {
        let d = rng.random_range(2..=200u64);
        let eps = rng.random_range(0.5..2.0);
        let base = MechanismSpec::single(1.0, 1.0, 1.0, d);
        let delta = 1e-5;
        let sigma = calibrate_sigma(&base, Budget::new(eps, delta).unwrap(), true, &AccountantConfig::default()).unwrap();
        let report = run_audit(&base.with_sigma(sigma), delta, 2000, true, 50, 100 + i).unwrap();
        if report.ci_low > report.eps_theoretical {
            violations.push((d, eps, sigma, report.outcome.eps_empirical, report.ci_low));
        }
    }
    assert!(violations.is_empty(), "configs where the audit exceeds the bound (d, eps, sigma, eps_emp, ci_low): {violations:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn better_classifier_never_lowers_epsilon(seed in any::<u64>(), shift in 0.0f64..2.0) {
        let mut rng = stream(seed, Stream::Audit);
        let absent: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        let present: Vec<f64> = (0..500).map(|_| rng.random::<f64>() + 0.2).collect();
        let better: Vec<f64> = present.iter().map(|x| x + shift).collect();
        let e1 = audit_sweep(&present, &absent, 0.0).unwrap();
        let e2 = audit_sweep(&better, &absent, 0.0).unwrap();
        prop_assert!(e2.eps_empirical + 1e-12 >= e1.eps_empirical || (e2.clamped && !e1.clamped));
        prop_assert!(e1.eps_empirical >= 0.0);
    }
}
