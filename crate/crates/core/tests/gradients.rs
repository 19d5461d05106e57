use pillarnext::train::gradcheck::DEFAULT_TOL;
use pillarnext::train::suite::{registered_checks, run_suite};

#[test]
fn every_registered_check_passes() {
    let rows = run_suite(7, DEFAULT_TOL);
    assert_eq!(rows.len(), registered_checks().len());
    for r in &rows {
        eprintln!("{:<32} {:>10.3e} {:>4} resamples  {}", r.name, r.max_rel_err, r.resamples, r.error);
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn impossible_tolerance_fails() {
    let rows = run_suite(7, 1e-15);
    assert!(rows.iter().any(|r| !r.passed));
}
