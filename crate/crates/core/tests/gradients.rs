use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use filmvox::gradcheck::{standard_suite, REQUIRED_COVERAGE, TOLERANCE};

#[test]
fn every_layer_and_loss_matches_finite_differences() {
    let t0 = Instant::now();
    let checks = standard_suite().unwrap();
    let elapsed = t0.elapsed();
    let mut covered = BTreeSet::new();
    let mut failures = Vec::new();
    for c in &checks {
        println!(
            "{:<32} params {:>5} entries {:>6} rel err {:.2e}",
            c.label, c.params, c.entries, c.rel_err
        );
        assert!(c.params <= 5000, "{} has {} parameters", c.label, c.params);
        if !c.passed() {
            failures.push(format!("{}: {:.3e}", c.label, c.rel_err));
        }
        covered.extend(c.covers.iter().cloned());
    }
    assert!(failures.is_empty(), "above {TOLERANCE}: {failures:?}");
    for k in REQUIRED_COVERAGE {
        assert!(covered.contains(*k), "{k} not exercised");
    }
    assert!(elapsed < Duration::from_secs(120), "suite took {elapsed:?}");
}
