//! Acceptance suite: every verification check must pass at its pinned
//! tolerance. One test per check; each prints its PASS/FAIL line so
//! `cargo test --test acceptance -- --nocapture` shows the full table that
//! `stabkit --check` prints.

use stabkit::checks;

fn assert_check(outcome: checks::CheckOutcome) {
    println!("{}", outcome.render_line());
    assert!(outcome.passed, "{}: {}", outcome.id, outcome.detail);
}

#[test]
fn c01_increment_identity() {
    assert_check(checks::increment_identity());
}

#[test]
fn c02_gaussian_moment_identity() {
    assert_check(checks::gaussian_moment_identity());
}

#[test]
fn c03_estimator_agreement() {
    assert_check(checks::estimator_agreement());
}

#[test]
fn c04_rate_bound_and_decay_slopes() {
    assert_check(checks::rate_bound_and_decay_slopes());
}

#[test]
fn c05_spectral_form_and_extremality() {
    assert_check(checks::spectral_form_and_extremality());
}

#[test]
fn c06_eigensolver_fidelity() {
    assert_check(checks::eigensolver_fidelity());
}

#[test]
fn c07_proxy_regime_split() {
    assert_check(checks::proxy_regime_split());
}

#[test]
fn c08_subspace_ratio() {
    assert_check(checks::subspace_ratio());
}

#[test]
fn c09_stage_timing() {
    assert_check(checks::stage_timing());
}

#[test]
fn c10_determinism() {
    assert_check(checks::determinism());
}
