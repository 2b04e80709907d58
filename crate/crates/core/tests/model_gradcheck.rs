//! Full-model gradient check: every module's parameters against central
//! finite differences on a tiny random instance.

use std::time::Instant;
use tksg_core::gradcheck::model_suite;

/// Central-difference step: large enough that f64 roundoff in the loss
/// (~1e-16 / h) stays below the tolerance for gradients near 1e-6, small
/// enough that the O(h²) truncation term is negligible.
const H: f64 = 1e-4;

#[test]
fn every_module_matches_finite_differences() {
    let start = Instant::now();
    for seed in 1..=4 {
        let suite = model_suite(seed, 24, H).unwrap();
        let modules: Vec<&str> = suite.iter().map(|(m, _)| *m).collect();
        assert_eq!(modules, ["encoder", "retrieval projection", "topic guidance", "keyword guidance", "decoder"]);
        for (module, report) in suite {
            assert!(report.checked > 0, "{module}: nothing checked");
            assert!(
                report.max_rel_err <= 1e-5,
                "seed {seed} {module}: rel err {:.3e} at {}",
                report.max_rel_err,
                report.worst
            );
        }
    }
    assert!(start.elapsed().as_secs() < 60);
}
