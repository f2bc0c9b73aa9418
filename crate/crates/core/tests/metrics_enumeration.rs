use aetransfer_core::metrics::{accuracy, asr, Asr, AsrMode, EvalRecord};
use aetransfer_core::rng;
use aetransfer_oracles::metrics as oracle;
use rand::Rng;

fn random_records(r: &mut impl Rng) -> Vec<EvalRecord> {
    let n = r.random_range(1..40);
    // few classes so that agreements are common
    let k = r.random_range(2..5);
    (0..n)
        .map(|_| EvalRecord {
            label: r.random_range(0..k),
            source_clean: r.random_range(0..k),
            target_clean: r.random_range(0..k),
            target_adv: r.random_range(0..k),
            source_adv: Some(r.random_range(0..k)),
        })
        .collect()
}

#[test]
fn metrics_equal_brute_force_enumeration() {
    let mut r = rng::stream(2024, &[]);
    let mut undefined = 0;
    for _ in 0..10_000 {
        let records = random_records(&mut r);
        let acc = accuracy(&records).unwrap();
        assert_eq!((acc.num, acc.den), oracle::accuracy_counts(&records));
        assert_eq!(acc.to_string(), oracle::format_percent(acc.num, acc.den));
        for (mode, require) in [(AsrMode::Formula, false), (AsrMode::RequireSourceSuccess, true)] {
            let (fooled, common) = oracle::asr_counts(&records, require);
            match asr(&records, mode).unwrap() {
                Asr::Defined(p) => {
                    assert_eq!((p.num, p.den), (fooled, common));
                    assert_eq!(p.to_string(), oracle::format_percent(fooled, common));
                }
                Asr::Undefined => {
                    assert_eq!(common, 0);
                    undefined += 1;
                }
            }
        }
    }
    assert!(undefined > 0, "the N_c = 0 case was never generated");
}
