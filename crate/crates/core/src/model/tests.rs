use alloc::vec::Vec;

use rand::Rng;

use super::*;
use crate::crypto::{EncryptionKey, ImageU8, Transform};
use crate::rng;
use crate::tensor::Tensor;

fn random_images(n: usize, seed: u64) -> Vec<ImageU8> {
    let mut r = rng::stream(seed, &[]);
    (0..n)
        .map(|_| ImageU8::new(32, 32, 3, (0..32 * 32 * 3).map(|_| r.random()).collect()).unwrap())
        .collect()
}

fn dataset(n: usize, seed: u64) -> LabeledImages {
    let labels = (0..n).map(|i| i % 10).collect();
    LabeledImages::new(random_images(n, seed), labels).unwrap()
}

fn small() -> ModelSpec {
    ModelSpec::new(Architecture::CnnSmall)
}

/// Freshly initialized model whose zero head is replaced by noise, so logits
/// actually depend on the input.
fn live(spec: ModelSpec, seed: u64, key: Option<EncryptionKey>) -> Classifier {
    let mut params = Network::build(&spec.network()).unwrap().init_params(seed);
    let mut r = rng::stream(seed, &[rng::label("head")]);
    for v in params.get_mut("head.weight").unwrap().data_mut() {
        *v = r.random_range(-0.5..0.5);
    }
    Classifier::new(spec, params, key, seed, TrainingSummary::default()).unwrap()
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let cfg = TrainConfig {
        epochs: 0,
        seed: 7,
        ..TrainConfig::default()
    };
    let m = train(small(), &dataset(8, 1), None, &cfg, None).unwrap();
    let init = m.network().init_params(rng::derive(7, &[rng::label("init")]));
    assert_eq!(m.params(), &init);
}

#[test]
fn training_rejects_bad_inputs() {
    let cfg = TrainConfig::default();
    assert_eq!(
        train(small(), &LabeledImages::default(), None, &cfg, None).unwrap_err(),
        ModelError::EmptyDataset
    );
    let bad = LabeledImages::new(random_images(1, 0), alloc::vec![10]).unwrap();
    assert!(matches!(
        train(small(), &bad, None, &cfg, None),
        Err(ModelError::LabelOutOfRange { label: 10, .. })
    ));
    let key = EncryptionKey::new(1, Transform::Shf, 5).unwrap();
    assert!(matches!(
        train(small(), &dataset(2, 0), None, &cfg, Some(key)),
        Err(ModelError::Crypto(crate::crypto::CryptoError::NotDivisible { .. }))
    ));
    let zero_batch = TrainConfig { batch_size: 0, ..cfg };
    assert!(matches!(
        train(small(), &dataset(2, 0), None, &zero_batch, None),
        Err(ModelError::InvalidConfig(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let data = dataset(8, 2);
    let key = EncryptionKey::new(9, Transform::Np, 4).unwrap();
    let a = train(small(), &data, None, &cfg, Some(key)).unwrap();
    let b = train(small(), &data, None, &cfg, Some(key)).unwrap();
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
}

#[test]
fn prediction_is_deterministic_and_argmax() {
    let m = live(small(), 1, None);
    let x = dataset(4, 5).batch(&[0, 1, 2, 3]).unwrap();
    let a = m.predict_batch(&x).unwrap();
    let b = m.predict_batch(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.logits.shape(), &[4, 10]);
    for (row, &l) in a.logits.data().chunks(10).zip(&a.labels) {
        assert_eq!(loss::argmax(row), l);
    }
}

#[test]
fn wrong_input_shape_is_rejected() {
    let m = live(small(), 1, None);
    let x = Tensor::zeros(alloc::vec![1, 3, 16, 16]);
    assert!(matches!(m.logits(&x), Err(ModelError::InputShape { .. })));
}

#[test]
fn out_of_range_inputs_are_clamped() {
    let m = live(small(), 1, None);
    let x = dataset(1, 5).batch(&[0]).unwrap();
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = if *v > 0.5 { *v + 3.0 } else { *v - 3.0 };
    }
    let mut clamped = y.clone();
    for v in clamped.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    assert_eq!(m.logits(&y).unwrap(), m.logits(&clamped).unwrap());
}

#[test]
fn encrypted_model_equals_network_on_encrypted_input() {
    for transform in Transform::ALL {
        let key = EncryptionKey::new(0xABCD, transform, 4).unwrap();
        let m = live(small(), 2, Some(key));
        let plain = m.with_key(None).unwrap();
        let images = random_images(3, 8);
        let x = images_to_tensor(&images).unwrap();
        let enc: Vec<_> = images.iter().map(|i| crate::crypto::encrypt_image(i, &key).unwrap()).collect();
        let xe = images_to_tensor(&enc).unwrap();
        assert_eq!(m.logits(&x).unwrap(), plain.logits(&xe).unwrap(), "{transform}");
    }
}

#[test]
fn plain_and_shuffled_models_disagree_somewhere() {
    let m = live(small(), 4, None);
    let shf = m.with_key(Some(EncryptionKey::new(5, Transform::Shf, 4).unwrap())).unwrap();
    let x = images_to_tensor(&random_images(100, 11)).unwrap();
    let a = m.predict_batch(&x).unwrap().logits;
    let b = shf.predict_batch(&x).unwrap().logits;
    assert_ne!(a, b);
}

fn chw_to_hwc(chw: &[f32]) -> Vec<f32> {
    let mut out = alloc::vec![0.0; chw.len()];
    for c in 0..3 {
        for p in 0..1024 {
            out[p * 3 + c] = chw[c * 1024 + p];
        }
    }
    out
}

#[test]
fn gradients_through_shf_and_np_follow_the_chain_rule() {
    let images = random_images(2, 21);
    let x = images_to_tensor(&images).unwrap();
    let labels = [3, 7];
    for transform in [Transform::Shf, Transform::Np] {
        let key = EncryptionKey::new(77, transform, 4).unwrap();
        let m = live(small(), 6, Some(key));
        let plain = m.with_key(None).unwrap();
        let enc: Vec<_> = images.iter().map(|i| crate::crypto::encrypt_image(i, &key).unwrap()).collect();
        let inner = plain
            .input_gradient(&images_to_tensor(&enc).unwrap(), LossKind::CrossEntropy, &labels, None)
            .unwrap();
        let outer = m.input_gradient(&x, LossKind::CrossEntropy, &labels, None).unwrap();
        assert_eq!(inner.losses, outer.losses);
        let cipher = m.cipher().unwrap();
        for i in 0..2 {
            let gi = chw_to_hwc(&inner.grad.data()[i * 3072..(i + 1) * 3072]);
            let go = chw_to_hwc(&outer.grad.data()[i * 3072..(i + 1) * 3072]);
            match cipher.tables() {
                crate::crypto::TransformTables::Shf { perm, .. } => {
                    // encrypted[p] = plain[perm[p]] inside every block
                    for by in 0..8 {
                        for bx in 0..8 {
                            for (p, &src) in perm.iter().enumerate() {
                                let at = |q: usize| {
                                    let (y, r) = (q / 12, q % 12);
                                    ((by * 4 + y) * 32 + bx * 4 + r / 3) * 3 + r % 3
                                };
                                assert_eq!(go[at(src as usize)], gi[at(p)]);
                            }
                        }
                    }
                }
                crate::crypto::TransformTables::Np { flips } => {
                    for (o, (a, b)) in go.iter().zip(&gi).enumerate() {
                        let (y, x, c) = (o / 96, (o / 3) % 32, o % 3);
                        let q = ((y % 4) * 4 + x % 4) * 3 + c;
                        let expect = if flips[q] == 1 { -*b } else { *b };
                        assert_eq!(*a, expect);
                    }
                }
                _ => unreachable!(),
            }
        }
    }
}

#[test]
fn ffx_models_have_no_gradient() {
    let key = EncryptionKey::new(1, Transform::Ffx, 4).unwrap();
    let m = live(small(), 6, Some(key));
    assert!(!m.supports_gradients());
    let x = images_to_tensor(&random_images(1, 0)).unwrap();
    assert_eq!(
        m.input_gradient(&x, LossKind::CrossEntropy, &[0], None).unwrap_err(),
        ModelError::Crypto(crate::crypto::CryptoError::GradientUnavailable)
    );
    assert!(m.predict_batch(&x).is_ok());
}

#[test]
fn targeted_losses_require_targets() {
    let m = live(small(), 6, None);
    let x = images_to_tensor(&random_images(1, 0)).unwrap();
    assert!(matches!(
        m.input_gradient(&x, LossKind::DlrTargeted, &[0], None),
        Err(ModelError::InvalidConfig(_))
    ));
    assert!(m.input_gradient(&x, LossKind::DlrTargeted, &[0], Some(&[1])).is_ok());
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    for (arch, key) in [
        (Architecture::CnnSmall, None),
        (Architecture::VitTiny, Some(EncryptionKey::new(u128::MAX - 3, Transform::Ffx, 8).unwrap())),
    ] {
        let mut m = live(ModelSpec::new(arch), 12, key);
        m.set_summary(TrainingSummary {
            epochs: 3,
            train_accuracy: Some(0.5),
            test_accuracy: None,
        });
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.key(), m.key());
        assert_eq!(back.summary(), m.summary());
        assert_eq!(back.train_seed(), 12);
        let x = images_to_tensor(&random_images(10, 3)).unwrap();
        let (a, b) = (m.logits(&x).unwrap(), back.logits(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn checkpoint_errors_are_structured() {
    let m = live(small(), 1, None);
    let bytes = encode_checkpoint(&m);
    for cut in [0, 5, 11, 40, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(
            matches!(
                err,
                ModelError::Checkpoint(CheckpointError::Truncated | CheckpointError::ChecksumMismatch)
            ),
            "cut {cut}: {err:?}"
        );
    }
    let mut old = bytes.clone();
    old[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(
        decode_checkpoint(&old).unwrap_err(),
        ModelError::Checkpoint(CheckpointError::UnsupportedVersion { found: 0 })
    );
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert_eq!(
        decode_checkpoint(&flipped).unwrap_err(),
        ModelError::Checkpoint(CheckpointError::ChecksumMismatch)
    );
    assert_eq!(
        decode_checkpoint(b"NOTACKPT-and-more").unwrap_err(),
        ModelError::Checkpoint(CheckpointError::BadMagic)
    );
}

#[test]
fn parameter_counts_are_reported() {
    for arch in Architecture::ALL {
        let n = Network::build(&ModelSpec::new(arch).network()).unwrap().param_count();
        assert!(n > 10_000 && n < 2_000_000, "{arch}: {n}");
    }
}
