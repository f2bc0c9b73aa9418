use std::collections::BTreeMap;

use aetransfer::config::ExperimentConfig;
use aetransfer::experiment::{self, at_most, Context, Experiment};
use aetransfer_core::attack::AttackKind;
use aetransfer_core::metrics::{AsrMode, Cell, CellMetrics, EvalRecord, ModelTag, Percent, TransferReport};
use proptest::prelude::*;

/// `n` commonly-correct records of which `fooled` fool the target.
fn records(n: usize, fooled: usize) -> Vec<EvalRecord> {
    (0..n)
        .map(|k| EvalRecord {
            label: 0,
            source_clean: 0,
            target_clean: 0,
            target_adv: usize::from(k < fooled),
            source_adv: Some(1),
        })
        .collect()
}

fn cell(cfg: &ExperimentConfig, source: &str, target: &str, n: usize, fooled: usize) -> Cell {
    let tag = |n: &str| -> ModelTag { cfg.model(n).unwrap().tag().unwrap() };
    Cell {
        source: tag(source),
        target: tag(target),
        attack: AttackKind::ApgdCe,
        metrics: Some(CellMetrics::from_records(records(n, fooled), AsrMode::Formula).unwrap()),
    }
}

fn run_checks(exp: Experiment, asr: &[(&str, usize)]) -> Vec<(String, bool)> {
    let mut cfg = ExperimentConfig::default();
    exp.apply(&mut cfg);
    let source = cfg.grid.sources[0].clone();
    let cells = asr.iter().map(|&(t, fooled)| cell(&cfg, &source, t, 100, fooled)).collect();
    let report = TransferReport { cells };
    let models = BTreeMap::new();
    let ctx = Context {
        cfg: &cfg,
        report: &report,
        models: &models,
    };
    let checks = match exp {
        Experiment::Tables2To5 => experiment::trends_tables_2_5(&ctx),
        Experiment::Tables6To7 => experiment::trends_tables_6_7(&ctx),
        Experiment::Tables8To9 => experiment::trends_tables_8_9(&ctx),
    };
    checks.into_iter().map(|c| (c.name, c.passed)).collect()
}

fn passed(checks: &[(String, bool)], name: &str) -> bool {
    checks.iter().find(|c| c.0 == name).unwrap_or_else(|| panic!("no check {name}")).1
}

#[test]
fn key_change_needs_a_fifty_point_drop() {
    let c = run_checks(Experiment::Tables8To9, &[("SHF-4", 100), ("SHF-4-key1", 50)]);
    assert!(passed(&c, "key-change"));
    assert!(passed(&c, "self-attack-asr"));
    let c = run_checks(Experiment::Tables8To9, &[("SHF-4", 100), ("SHF-4-key1", 51)]);
    assert!(!passed(&c, "key-change"));
    let c = run_checks(Experiment::Tables8To9, &[("SHF-4", 94), ("SHF-4-key1", 0)]);
    assert!(!passed(&c, "self-attack-asr"));
    let c = run_checks(Experiment::Tables8To9, &[("SHF-4", 95), ("SHF-4-key1", 0)]);
    assert!(passed(&c, "self-attack-asr"));
}

#[test]
fn block_size_trend_allows_five_points_of_noise() {
    let base = [("plain", 100), ("SHF-4", 60), ("SHF-8", 65), ("SHF-16", 40), ("NP-4", 30), ("NP-8", 30), ("NP-16", 10), ("FFX-4", 20), ("FFX-8", 10), ("FFX-16", 50)];
    let c = run_checks(Experiment::Tables6To7, &base);
    assert!(passed(&c, "SHF-non-increasing-in-block-size"));
    assert!(passed(&c, "NP-non-increasing-in-block-size"));
    assert!(!passed(&c, "FFX-non-increasing-in-block-size"));
    assert!(passed(&c, "ffx16-below-shf4"));
    let mut worse = base;
    worse[2].1 = 66;
    worse[9].1 = 51;
    let c = run_checks(Experiment::Tables6To7, &worse);
    assert!(!passed(&c, "SHF-non-increasing-in-block-size"));
    assert!(!passed(&c, "ffx16-below-shf4"));
    // The plain model's clean accuracy is unknown here.
    assert!(!passed(&c, "white-box-collapse"));
}

#[test]
fn architecture_gap_is_strict() {
    let c = run_checks(Experiment::Tables2To5, &[("cnn_small", 100), ("cnn_deep", 40), ("vit_tiny", 39)]);
    assert!(passed(&c, "architecture-gap"));
    let c = run_checks(Experiment::Tables2To5, &[("cnn_small", 100), ("cnn_deep", 40), ("vit_tiny", 40)]);
    assert!(!passed(&c, "architecture-gap"));
}

#[test]
fn missing_or_undefined_cells_fail_their_check() {
    let c = run_checks(Experiment::Tables8To9, &[("SHF-4", 100)]);
    assert!(!passed(&c, "key-change"));
    let mut cfg = ExperimentConfig::default();
    Experiment::Tables8To9.apply(&mut cfg);
    let mut undefined = cell(&cfg, "SHF-4", "SHF-4-key1", 1, 0);
    undefined.metrics = Some(
        CellMetrics::from_records(
            vec![EvalRecord {
                label: 0,
                source_clean: 0,
                target_clean: 1,
                target_adv: 1,
                source_adv: None,
            }],
            AsrMode::Formula,
        )
        .unwrap(),
    );
    let report = TransferReport {
        cells: vec![cell(&cfg, "SHF-4", "SHF-4", 10, 10), undefined],
    };
    let models = BTreeMap::new();
    let checks = experiment::trends_tables_8_9(&Context {
        cfg: &cfg,
        report: &report,
        models: &models,
    });
    let kc = checks.iter().find(|c| c.name == "key-change").unwrap();
    assert!(!kc.passed);
    assert!(kc.detail.contains("undefined"));
}

proptest! {
    #[test]
    fn at_most_agrees_with_rational_arithmetic(an in 0u64..500, ad in 1u64..500, bn in 0u64..500, bd in 1u64..500, margin in -100i64..100) {
        let a = Percent { num: an.min(ad), den: ad };
        let b = Percent { num: bn.min(bd), den: bd };
        let gap = a.value() - b.value() - margin as f64;
        if gap.abs() > 1e-9 {
            prop_assert_eq!(at_most(a, b, margin), gap < 0.0);
        } else {
            prop_assert!(at_most(a, b, margin));
        }
    }
}
