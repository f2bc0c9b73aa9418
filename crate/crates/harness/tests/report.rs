use aetransfer::report::{self, Format, ABSENT, CSV_HEADER};
use aetransfer_core::attack::AttackKind;
use aetransfer_core::crypto::Transform;
use aetransfer_core::metrics::{AsrMode, Cell, CellMetrics, EvalRecord, ModelTag, TransferReport};
use aetransfer_oracles::metrics::{accuracy_counts, asr_counts, format_percent};
use proptest::prelude::*;

fn tag(name: &str, t: Option<(Transform, usize)>) -> ModelTag {
    ModelTag {
        name: name.into(),
        transform: t.map(|p| p.0),
        block_size: t.map(|p| p.1),
    }
}

fn record(label: usize, sc: usize, tc: usize, ta: usize) -> EvalRecord {
    EvalRecord {
        label,
        source_clean: sc,
        target_clean: tc,
        target_adv: ta,
        source_adv: None,
    }
}

fn cell(source: &str, target: ModelTag, attack: AttackKind, records: Option<Vec<EvalRecord>>) -> Cell {
    Cell {
        source: tag(source, None),
        target,
        attack,
        metrics: records.map(|r| CellMetrics::from_records(r, AsrMode::Formula).unwrap()),
    }
}

#[test]
fn empty_report_is_a_header_only_csv() {
    let csv = report::to_csv(&TransferReport::default());
    assert_eq!(csv, CSV_HEADER.join(",") + "\n");
    assert!(report::parse_csv(&csv).unwrap().is_empty());
}

#[test]
fn one_cell_report_renders_a_one_row_table() {
    let r = TransferReport {
        cells: vec![cell("plain", tag("SHF-4", Some((Transform::Shf, 4))), AttackKind::ApgdCe, Some(vec![record(1, 1, 1, 2), record(2, 2, 2, 2), record(3, 3, 4, 3)]))],
    };
    let table = report::to_table(&r);
    let acc_block: Vec<&str> = table.split("\n\n").next().unwrap().lines().collect();
    assert_eq!(acc_block.len(), 3, "{table}");
    assert!(acc_block[0].contains("plain") && acc_block[0].contains("Acc"));
    assert!(acc_block[1].contains("APGD-ce"));
    assert!(acc_block[2].starts_with("SHF-4") && acc_block[2].ends_with("66.67"), "{table}");
    assert!(table.contains("ASR (%)"));
    assert!(table.contains("50.00"));
    let rows = report::parse_csv(&report::to_csv(&r)).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].transform.as_str(), rows[0].block_size), ("SHF", Some(4)));
    assert_eq!((rows[0].n, rows[0].n_c), (Some(3), Some(2)));
}

#[test]
fn absent_and_undefined_cells_are_marked() {
    let r = TransferReport {
        cells: vec![
            cell("plain", tag("plain", None), AttackKind::Square, None),
            cell("plain", tag("FFX-16", Some((Transform::Ffx, 16))), AttackKind::Square, Some(vec![record(1, 2, 1, 1)])),
        ],
    };
    let table = report::to_table(&r);
    assert!(table.contains(ABSENT));
    assert!(table.contains("undef"));
    let rows = report::parse_csv(&report::to_csv(&r)).unwrap();
    assert_eq!(rows[0].n, None);
    assert_eq!(rows[0].acc, "");
    assert_eq!(rows[0].transform, "plain");
    assert_eq!(rows[1].asr, "undefined");
    let json: serde_json::Value = serde_json::from_str(&report::to_json(&r)).unwrap();
    assert!(json["cells"][0]["acc"].is_null());
    assert!(json["cells"][1]["asr"].is_null());
    assert_eq!(json["cells"][1]["acc"]["percent"], "100.00");
}

#[test]
fn emit_writes_each_format_and_reports_unwritable_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let r = TransferReport::default();
    let paths = report::emit_report(&r, &Format::ALL, &dir.path().join("rep")).unwrap();
    assert_eq!(paths.len(), 3);
    for (p, f) in paths.iter().zip(Format::ALL) {
        assert_eq!(std::fs::read_to_string(p).unwrap(), report::render(&r, f));
    }
    let blocker = dir.path().join("plainfile");
    std::fs::write(&blocker, "x").unwrap();
    assert!(report::emit_report(&r, &[Format::Csv], &blocker).is_err());
}

fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
    prop::collection::vec((0usize..3, 0usize..3, 0usize..3, 0usize..3), 1..12)
        .prop_map(|v| v.into_iter().map(|(l, s, t, a)| record(l, s, t, a)).collect())
}

fn arb_cell() -> impl Strategy<Value = Cell> {
    let transform = prop::option::of((prop::sample::select(Transform::ALL.to_vec()), prop::sample::select(vec![4usize, 8, 16])));
    (
        "[a-z][a-z0-9_,\" -]{0,8}",
        "[A-Z][A-Za-z0-9-]{0,6}",
        transform,
        prop::sample::select(AttackKind::ALL.to_vec()),
        prop::option::of(arb_records()),
    )
        .prop_map(|(s, t, tr, a, recs)| cell(&s, tag(&t, tr), a, recs))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Re-parsed CSV rows agree field for field with the in-memory report,
    /// percentages checked against independent counting.
    #[test]
    fn csv_round_trip_matches_the_report(cells in prop::collection::vec(arb_cell(), 0..6)) {
        let r = TransferReport { cells };
        let rows = report::parse_csv(&report::to_csv(&r)).unwrap();
        prop_assert_eq!(rows.len(), r.cells.len());
        for (row, c) in rows.iter().zip(&r.cells) {
            prop_assert_eq!(&row.source, &c.source.name);
            prop_assert_eq!(&row.target, &c.target.name);
            prop_assert_eq!(row.transform.clone(), c.target.transform.map_or("plain".to_string(), |t| t.to_string()));
            prop_assert_eq!(row.block_size, c.target.block_size);
            prop_assert_eq!(row.attack.parse::<AttackKind>().unwrap(), c.attack);
            match &c.metrics {
                None => {
                    prop_assert_eq!(row.n, None);
                    prop_assert!(row.acc.is_empty() && row.asr.is_empty());
                }
                Some(m) => {
                    prop_assert_eq!(row.n, Some(m.records.len()));
                    let (num, den) = accuracy_counts(&m.records);
                    prop_assert_eq!(&row.acc, &format_percent(num, den));
                    let (num, den) = asr_counts(&m.records, false);
                    prop_assert_eq!(row.n_c, Some(den as usize));
                    let want = if den == 0 { "undefined".to_string() } else { format_percent(num, den) };
                    prop_assert_eq!(&row.asr, &want);
                }
            }
        }
    }
}
