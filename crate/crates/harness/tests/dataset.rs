use std::path::Path;

use aetransfer::dataset::{self, DataError, DataSource, CLASSES, RECORD_LEN, TEST_FILE, TRAIN_FILES};
use aetransfer_oracles::cifar;
use proptest::prelude::*;

/// `n` records with label `i % 10` and pixel bytes from a simple hash.
fn fake_batch(n: usize, salt: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * RECORD_LEN);
    for i in 0..n {
        out.push((i % CLASSES) as u8);
        out.extend((0..RECORD_LEN - 1).map(|j| ((i * 131 + j * 7) as u8) ^ salt));
    }
    out
}

#[test]
fn decoded_images_match_the_reference_decoder_byte_for_byte() {
    let bytes = fake_batch(12, 0x5a);
    let set = dataset::decode_batch(Path::new("data_batch_1.bin"), &bytes).unwrap();
    assert_eq!(set.len(), 12);
    for i in [0, 1, 11] {
        let (label, hwc) = cifar::decode_record(&bytes, i);
        assert_eq!(set.labels()[i], label as usize);
        assert_eq!(set.images()[i].data(), &hwc[..]);
    }
}

#[test]
fn truncated_file_names_file_and_offset() {
    let mut bytes = fake_batch(3, 1);
    bytes.truncate(2 * RECORD_LEN + 100);
    match dataset::decode_batch(Path::new("x/test_batch.bin"), &bytes) {
        Err(DataError::RecordLength { file, offset, len }) => {
            assert_eq!(file, Path::new("x/test_batch.bin"));
            assert_eq!(offset, 2 * RECORD_LEN);
            assert_eq!(len, 2 * RECORD_LEN + 100);
        }
        other => panic!("expected a record-length error, got {other:?}"),
    }
}

#[test]
fn label_outside_the_classes_is_rejected() {
    let mut bytes = fake_batch(3, 1);
    bytes[RECORD_LEN] = 10;
    let err = dataset::decode_batch(Path::new("b.bin"), &bytes).unwrap_err();
    assert!(matches!(err, DataError::Label { offset, label: 10, .. } if offset == RECORD_LEN));
    assert!(err.to_string().contains("b.bin"));
}

#[test]
fn stratified_subset_has_exactly_100_per_class() {
    let set = dataset::decode_batch(Path::new("b"), &fake_batch(2000, 3)).unwrap();
    let sub = dataset::stratified_subset(&set, 1000, 11, "train").unwrap();
    assert_eq!(sub.len(), 1000);
    for c in 0..CLASSES {
        assert_eq!(sub.labels().iter().filter(|&&l| l == c).count(), 100);
    }
    let again = dataset::stratified_subset(&set, 1000, 11, "train").unwrap();
    assert_eq!(sub.labels(), again.labels());
    assert_eq!(sub.images(), again.images());
    let other = dataset::stratified_subset(&set, 1000, 12, "train").unwrap();
    assert_ne!(sub.images(), other.images());
}

#[test]
fn subset_larger_than_a_class_fails() {
    let set = dataset::decode_batch(Path::new("b"), &fake_batch(50, 3)).unwrap();
    assert!(matches!(dataset::stratified_subset(&set, 60, 0, "t"), Err(DataError::TooFew { .. })));
}

#[test]
fn loads_a_directory_of_binary_batches() {
    let dir = tempfile::tempdir().unwrap();
    for (k, f) in TRAIN_FILES.iter().enumerate() {
        std::fs::write(dir.path().join(f), fake_batch(40, k as u8)).unwrap();
    }
    std::fs::write(dir.path().join(TEST_FILE), fake_batch(30, 9)).unwrap();
    let s = dataset::load_cifar10(Some(dir.path()), 100, 20, 4).unwrap();
    assert_eq!(s.source, DataSource::Cifar10(dir.path().to_path_buf()));
    assert_eq!((s.train.len(), s.test.len()), (100, 20));
    assert_eq!(s.test.labels().iter().filter(|&&l| l == 0).count(), 2);
}

#[test]
fn missing_file_inside_a_dataset_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(TEST_FILE), fake_batch(30, 9)).unwrap();
    let err = dataset::load_cifar10(Some(dir.path()), 10, 10, 0).unwrap_err();
    assert!(matches!(err, DataError::Io { ref file, .. } if file.ends_with(TRAIN_FILES[0])));
}

#[test]
fn absent_directory_falls_back_to_synthetic_data() {
    let s = dataset::load_cifar10(Some(Path::new("/nonexistent/cifar")), 30, 20, 1).unwrap();
    assert_eq!(s.source, DataSource::Synthetic);
    assert_eq!(s.train.labels()[..12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
    let none = dataset::load_cifar10(None, 30, 20, 1).unwrap();
    assert_eq!(s.train.images(), none.train.images());
    assert_ne!(s.train.images()[..20], s.test.images()[..20]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_images_depend_only_on_seed_split_and_index(seed in any::<u64>(), n in 1usize..12, m in 1usize..12) {
        let a = dataset::synthetic(n.max(m), seed, "train");
        let b = dataset::synthetic(n.min(m), seed, "train");
        prop_assert_eq!(&a.images()[..b.len()], b.images());
        for (i, &l) in a.labels().iter().enumerate() {
            prop_assert_eq!(l, i % CLASSES);
        }
    }

    #[test]
    fn every_whole_record_file_decodes(n in 0usize..6, salt in any::<u8>()) {
        let bytes = fake_batch(n, salt);
        let set = dataset::decode_batch(Path::new("p"), &bytes).unwrap();
        prop_assert_eq!(set.len(), n);
        for i in 0..n {
            let (label, hwc) = cifar::decode_record(&bytes, i);
            prop_assert_eq!(set.labels()[i], label as usize);
            prop_assert_eq!(set.images()[i].data(), &hwc[..]);
        }
    }
}
