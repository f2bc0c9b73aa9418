//! Analytic gradients against central finite differences of an independent
//! f64 interpreter.

use aetransfer_oracles::cases::{layer_cases, network_cases, GradCase};

const TOL: f64 = 1e-4;

fn assert_close(case: &GradCase) {
    let report = case.run();
    for leaf in &report.leaves {
        assert!(leaf.checked > 0, "{} / {}: every coordinate skipped", case.name, leaf.name);
        assert!(
            leaf.rel_error < TOL,
            "{} / {}: rel error {:.3e} ({:.3e} vs {:.3e})",
            case.name,
            leaf.name,
            leaf.rel_error,
            leaf.analytic_norm,
            leaf.numeric_norm
        );
    }
}

#[test]
fn every_layer_kind() {
    let cases = layer_cases();
    assert!(cases.len() >= 13);
    for c in &cases {
        assert_close(c);
    }
}

#[test]
fn end_to_end_networks() {
    for c in &network_cases() {
        assert_close(c);
    }
}
