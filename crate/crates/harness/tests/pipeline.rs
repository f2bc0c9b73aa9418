mod common;

use aetransfer::experiment::{self, config_hash};
use aetransfer::report;
use aetransfer_core::attack::AttackKind;
use aetransfer_core::crypto::Transform;
use common::{encrypted, plain, tiny_config, with_roster};

#[test]
fn minimal_self_attack_pipeline_gives_one_cell_per_attack() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_roster(tiny_config(dir.path()), vec![plain()], &["plain"], &["plain"]);
    let out = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(out.report.cells.len(), 4);
    for (c, kind) in out.report.cells.iter().zip(AttackKind::ALL) {
        assert_eq!(c.attack, kind);
        assert_eq!(c.metrics.as_ref().unwrap().n, 6);
    }
    assert!(out.manifest.audit.is_clean(), "{:?}", out.manifest.audit);
    assert_eq!(out.manifest.audit.images, 24);
    assert!(out.manifest.failed_stages().next().is_none());
    for f in ["report.csv", "report.json", "report.txt", "manifest.json", "trends.txt"] {
        assert!(out.dir.join(f).is_file(), "{f}");
    }
    let rows = report::parse_csv(&std::fs::read_to_string(out.dir.join("report.csv")).unwrap()).unwrap();
    assert_eq!(rows, report::rows(&out.report));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], config_hash(&cfg));
    assert!(manifest["config"].as_str().unwrap().contains("square_p_init"));
    for (path, sum) in manifest["artifacts"].as_object().unwrap() {
        let p = cfg.run.out.join(path);
        assert_eq!(aetransfer::store::file_sha256(&p).unwrap(), sum.as_str().unwrap(), "{path}");
    }
}

#[test]
fn warm_reruns_and_other_worker_counts_reproduce_every_artifact() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let roster = vec![plain(), encrypted("SHF-4", Transform::Shf, 4), encrypted("NP-8", Transform::Np, 8)];
    let cfg_a = with_roster(tiny_config(a.path()), roster.clone(), &["plain", "SHF-4"], &["plain", "SHF-4", "NP-8"]);
    let mut cfg_b = with_roster(tiny_config(b.path()), roster, &["plain", "SHF-4"], &["plain", "SHF-4", "NP-8"]);
    cfg_b.run.workers = 3;
    assert_eq!(config_hash(&cfg_a), config_hash(&cfg_b));

    let cold = experiment::run_experiment(&cfg_a).unwrap();
    let csv = std::fs::read(cold.dir.join("report.csv")).unwrap();
    assert!(cold.manifest.stages.iter().all(|s| !s.cached));

    let warm = experiment::run_experiment(&cfg_a).unwrap();
    assert!(warm.manifest.stages.iter().filter(|s| s.stage.starts_with("train:") || s.stage.starts_with("attack:")).all(|s| s.cached));
    assert_eq!(std::fs::read(warm.dir.join("report.csv")).unwrap(), csv);
    assert_eq!(warm.manifest.artifacts, cold.manifest.artifacts);
    assert_eq!(warm.report, cold.report);

    let other = experiment::run_experiment(&cfg_b).unwrap();
    assert_eq!(std::fs::read(other.dir.join("report.csv")).unwrap(), csv);
    assert_eq!(other.manifest.artifacts, cold.manifest.artifacts);
    assert_eq!(other.batches, cold.batches);
}

#[test]
fn stage_failures_are_recorded_and_the_rest_of_the_grid_completes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_roster(
        tiny_config(dir.path()),
        vec![plain(), encrypted("FFX-4", Transform::Ffx, 4)],
        &["FFX-4", "plain"],
        &["plain", "FFX-4"],
    );
    let out = experiment::run_experiment(&cfg).unwrap();
    let failed: Vec<_> = out.manifest.failed_stages().map(|s| s.stage.as_str()).collect();
    assert_eq!(failed, ["attack:FFX-4:APGD-ce", "attack:FFX-4:APGD-t", "attack:FFX-4:FAB-t"]);
    for s in out.manifest.failed_stages() {
        assert!(s.detail.as_deref().unwrap().contains("gradient"), "{s:?}");
    }
    assert_eq!(out.report.cells.len(), 2 * 4 * 2);
    for c in &out.report.cells {
        let expect_present = c.source.name == "plain" || c.attack == AttackKind::Square;
        assert_eq!(c.metrics.is_some(), expect_present, "{} {} {}", c.source.name, c.target.name, c.attack);
    }
    let table = std::fs::read_to_string(out.dir.join("report.txt")).unwrap();
    assert!(table.contains(report::ABSENT));
}

#[test]
fn a_corrupt_cache_entry_is_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_roster(tiny_config(dir.path()), vec![plain()], &["plain"], &["plain"]);
    let first = experiment::run_experiment(&cfg).unwrap();
    let ckpt = first.manifest.stages.iter().find(|s| s.stage == "train:plain").unwrap().artifact.clone().unwrap();
    std::fs::write(dir.path().join(&ckpt), b"garbage").unwrap();
    let again = experiment::run_experiment(&cfg).unwrap();
    let stage = again.manifest.stages.iter().find(|s| s.stage == "train:plain").unwrap();
    assert!(!stage.cached);
    assert_eq!(again.manifest.artifacts, first.manifest.artifacts);
}

#[test]
fn invalid_configuration_is_reported_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_roster(tiny_config(dir.path()), vec![plain()], &["nobody"], &["plain"]);
    assert!(matches!(experiment::run_experiment(&cfg), Err(experiment::HarnessError::Config(_))));
    assert!(!dir.path().join("cache").exists());
}
