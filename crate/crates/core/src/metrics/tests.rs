use alloc::vec;
use alloc::string::ToString;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;

fn rec(label: usize, source_clean: usize, target_clean: usize, target_adv: usize) -> EvalRecord {
    EvalRecord {
        label,
        source_clean,
        target_clean,
        target_adv,
        source_adv: None,
    }
}

#[test]
fn accuracy_examples() {
    let all = vec![rec(1, 1, 1, 1), rec(2, 2, 2, 2)];
    assert_eq!(accuracy(&all).unwrap().to_string(), "100.00");
    let mixed = vec![rec(0, 0, 0, 0), rec(1, 1, 1, 1), rec(2, 2, 2, 5), rec(3, 3, 3, 3)];
    assert_eq!(accuracy(&mixed).unwrap().value(), 75.0);
    assert_eq!(accuracy(&[]), Err(MetricError::Empty));
}

#[test]
fn asr_examples() {
    let nothing_fooled = vec![rec(0, 0, 0, 0), rec(1, 1, 1, 1)];
    assert_eq!(asr(&nothing_fooled, AsrMode::Formula).unwrap().to_string(), "0.00");
    // two excluded by the common-correct filter, two fooled, two not
    let six = vec![
        rec(0, 1, 0, 3),
        rec(1, 1, 2, 3),
        rec(2, 2, 2, 0),
        rec(3, 3, 3, 0),
        rec(4, 4, 4, 4),
        rec(5, 5, 5, 5),
    ];
    assert_eq!(common_count(&six), 4);
    assert_eq!(asr(&six, AsrMode::Formula).unwrap(), Asr::Defined(Percent { num: 2, den: 4 }));
    assert_eq!(asr(&six, AsrMode::Formula).unwrap().to_string(), "50.00");
    let none_common = vec![rec(0, 1, 0, 0), rec(1, 1, 0, 0)];
    assert_eq!(asr(&none_common, AsrMode::Formula).unwrap(), Asr::Undefined);
    assert_eq!(asr(&none_common, AsrMode::Formula).unwrap().to_string(), "undefined");
}

#[test]
fn source_success_mode_needs_and_uses_source_predictions() {
    let mut r = vec![rec(0, 0, 0, 1), rec(1, 1, 1, 2)];
    assert_eq!(asr(&r, AsrMode::RequireSourceSuccess), Err(MetricError::MissingSourceAdversarial(0)));
    r[0].source_adv = Some(3);
    r[1].source_adv = Some(1);
    assert_eq!(asr(&r, AsrMode::RequireSourceSuccess).unwrap().to_string(), "50.00");
    assert_eq!(asr(&r, AsrMode::Formula).unwrap().to_string(), "100.00");
}

#[test]
fn rounding_is_half_up() {
    let p = |num, den| Percent { num, den }.to_string();
    assert_eq!(p(1, 3), "33.33");
    assert_eq!(p(2, 3), "66.67");
    // 1/8 = 12.5 % exactly; 1/16 = 6.25 %; 1/32 = 3.125 % -> 3.13
    assert_eq!(p(1, 8), "12.50");
    assert_eq!(p(1, 32), "3.13");
    assert_eq!(p(1, 4096), "0.02");
    assert_eq!(p(0, 7), "0.00");
    assert_eq!(p(7, 7), "100.00");
}

#[test]
fn self_cell_with_perfect_clean_accuracy_has_asr_equal_to_100_minus_acc() {
    let records: Vec<EvalRecord> = (0..40).map(|i| rec(i % 10, i % 10, i % 10, if i % 3 == 0 { (i + 1) % 10 } else { i % 10 })).collect();
    let acc = accuracy(&records).unwrap();
    let Asr::Defined(a) = asr(&records, AsrMode::Formula).unwrap() else { panic!() };
    assert_eq!(acc.den, a.den);
    assert_eq!(acc.num + a.num, acc.den);
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_consistent(raw in prop::collection::vec((0usize..4, 0usize..4, 0usize..4, 0usize..4), 1..60)) {
        let records: Vec<EvalRecord> = raw.iter().map(|&(a, b, c, d)| rec(a, b, c, d)).collect();
        let acc = accuracy(&records).unwrap();
        prop_assert!(acc.num <= acc.den && acc.den == records.len() as u64);
        match asr(&records, AsrMode::Formula).unwrap() {
            Asr::Defined(p) => {
                prop_assert!(p.num <= p.den);
                prop_assert_eq!(p.den as usize, common_count(&records));
                prop_assert!(p.hundredths() <= 10_000);
            }
            Asr::Undefined => prop_assert_eq!(common_count(&records), 0),
        }
    }
}
