use aetransfer_core::crypto::{EncryptionKey, ImageU8, Transform};
use aetransfer_core::model::{train, Architecture, LabeledImages, LrSchedule, ModelSpec, Optimizer, TrainConfig};
use aetransfer_core::rng;
use rand::Rng;

fn noise_set(n: usize, seed: u64) -> LabeledImages {
    let mut r = rng::stream(seed, &[]);
    let images = (0..n)
        .map(|_| ImageU8::new(32, 32, 3, (0..3072).map(|_| r.random()).collect()).unwrap())
        .collect();
    LabeledImages::new(images, (0..n).map(|i| i % 10).collect()).unwrap()
}

fn overfit_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 8,
        lr: 1e-3,
        schedule: LrSchedule::Cosine,
        crop_pad: 0,
        flip: false,
        weight_decay: 0.0,
        seed: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn memorizes_a_small_set() {
    let data = noise_set(32, 3);
    let model = train(ModelSpec::new(Architecture::CnnSmall), &data, None, &overfit_config(), None).unwrap();
    assert_eq!(model.summary().train_accuracy, Some(1.0));
    assert_eq!(model.accuracy(&data, 32).unwrap(), 1.0);
}

#[test]
fn memorizes_a_small_encrypted_set() {
    let data = noise_set(32, 4);
    let key = EncryptionKey::new(42, Transform::Ffx, 4).unwrap();
    let model = train(ModelSpec::new(Architecture::CnnSmall), &data, None, &overfit_config(), Some(key)).unwrap();
    assert_eq!(model.summary().train_accuracy, Some(1.0), "{:?}", model.summary());
}

#[test]
fn sgd_with_momentum_memorizes_too() {
    let data = noise_set(32, 5);
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        epochs: 200,
        lr: 0.02,
        ..overfit_config()
    };
    let model = train(ModelSpec::new(Architecture::CnnSmall), &data, None, &cfg, None).unwrap();
    assert_eq!(model.summary().train_accuracy, Some(1.0), "{:?}", model.summary());
}
