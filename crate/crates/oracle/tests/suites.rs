use std::time::{Duration, Instant};

use transfer_lab::attack::Norm;
use transfer_lab_oracle::suites::{autodiff, constraints, equivalences, gradient_identities};

#[test]
fn loss_gradients_match_closed_forms() {
    let start = Instant::now();
    let r = gradient_identities(200, 1);
    assert!(r.ce_max_err < 1e-6, "{r:?}");
    assert_eq!(r.logit_mismatches, 0);
    assert!(start.elapsed() < Duration::from_secs(1));
}

#[test]
fn engine_gradients_match_finite_differences() {
    let start = Instant::now();
    let checks = autodiff(0..20, 24);
    for c in &checks {
        assert!(c.passed(1e-3), "{c:?}");
    }
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
}

#[test]
fn attacks_stay_feasible() {
    for norm in [Norm::Linf, Norm::L2] {
        let r = constraints(norm, 1000, 5);
        assert_eq!(r.iterations, 1000);
        assert!(r.ball_excess <= 1e-7, "{norm}: {r:?}");
        assert_eq!(r.range_excess, 0.0, "{norm}: {r:?}");
    }
}

#[test]
fn disabled_and_degenerate_methods_coincide() {
    for e in equivalences(11) {
        assert!(e.identical, "{}", e.name);
    }
}
