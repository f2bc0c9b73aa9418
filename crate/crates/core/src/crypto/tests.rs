use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::*;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageU8 {
    let data = (0..h * w * c).map(|_| rng.random::<u8>()).collect();
    ImageU8::new(h, w, c, data).unwrap()
}

fn key(seed: u128, t: Transform, m: usize) -> EncryptionKey {
    EncryptionKey::new(seed, t, m).unwrap()
}

#[test]
fn tables_are_deterministic() {
    for t in Transform::ALL {
        let k = key(0xdead_beef, t, 4);
        assert_eq!(derive_tables(&k, 3).unwrap(), derive_tables(&k, 3).unwrap());
    }
}

#[test]
fn shuffle_tables_are_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let k = key(rng.random(), Transform::Shf, 4);
        let TransformTables::Shf { perm, inverse } = derive_tables(&k, 3).unwrap() else {
            unreachable!()
        };
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..48).collect::<Vec<u32>>());
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(inverse[p as usize] as usize, i);
        }
    }
}

#[test]
fn one_bit_seed_change_changes_the_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 1000;
    let mut differ = 0;
    for _ in 0..trials {
        let seed: u128 = rng.random();
        let bit = rng.random_range(0..128);
        let a = derive_tables(&key(seed, Transform::Shf, 4), 3).unwrap();
        let b = derive_tables(&key(seed ^ (1u128 << bit), Transform::Shf, 4), 3).unwrap();
        if a != b {
            differ += 1;
        }
    }
    assert!(differ as f64 / trials as f64 > 0.99, "{differ}/{trials}");
}

#[test]
fn partition_counts_and_identity_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 32, 32, 3);
    assert_eq!(partition_blocks(&img, 16).unwrap().len(), 4);
    let whole = partition_blocks(&img, 32).unwrap();
    assert_eq!(whole.len(), 1);
    assert_eq!(whole.get(0).unwrap(), img.data());
}

#[test]
fn merge_inverts_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 32, 32, 3);
    for m in [1, 2, 4, 8, 16, 32] {
        let blocks = partition_blocks(&img, m).unwrap();
        assert_eq!(blocks.len(), (32 / m) * (32 / m));
        assert!(blocks.iter().all(|b| b.len() == m * m * 3));
        assert_eq!(merge_blocks(&blocks).unwrap(), img);
    }
}

#[test]
fn block_contents_follow_raster_order() {
    // 4x4 single channel, values = index
    let img = ImageU8::new(4, 4, 1, (0..16).collect()).unwrap();
    let blocks = partition_blocks(&img, 2).unwrap();
    let got: Vec<&[u8]> = blocks.iter().collect();
    assert_eq!(got, vec![&[0, 1, 4, 5][..], &[2, 3, 6, 7], &[8, 9, 12, 13], &[10, 11, 14, 15]]);
}

#[test]
fn non_divisible_block_size_is_rejected() {
    let img = ImageU8::new(32, 32, 3, vec![0; 3072]).unwrap();
    assert_eq!(
        partition_blocks(&img, 5).unwrap_err(),
        CryptoError::NotDivisible {
            block: 5,
            height: 32,
            width: 32
        }
    );
    assert_eq!(
        encrypt_image(&img, &key(1, Transform::Ffx, 3)).unwrap_err(),
        CryptoError::NotDivisible {
            block: 3,
            height: 32,
            width: 32
        }
    );
    assert_eq!(EncryptionKey::new(1, Transform::Shf, 0).unwrap_err(), CryptoError::ZeroBlockSize);
}

#[test]
fn shuffling_a_constant_image_is_a_no_op() {
    let img = ImageU8::new(32, 32, 3, vec![77; 3072]).unwrap();
    assert_eq!(encrypt_image(&img, &key(9, Transform::Shf, 8)).unwrap(), img);
}

#[test]
fn np_is_an_involution_and_only_negates() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 32, 32, 3);
    let k = key(rng.random(), Transform::Np, 4);
    let once = encrypt_image(&img, &k).unwrap();
    assert_eq!(encrypt_image(&once, &k).unwrap(), img);
    assert_eq!(decrypt_image(&img, &k).unwrap(), once);
    let TransformTables::Np { flips } = derive_tables(&k, 3).unwrap() else {
        unreachable!()
    };
    let (a, b) = (partition_blocks(&img, 4).unwrap(), partition_blocks(&once, 4).unwrap());
    for (pa, pb) in a.iter().zip(b.iter()) {
        for ((&x, &y), &f) in pa.iter().zip(pb).zip(&flips) {
            assert_eq!(y, if f == 1 { 255 - x } else { x });
        }
    }
}

#[test]
fn shf_preserves_histograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for m in [4, 8, 16] {
        let img = random_image(&mut rng, 32, 32, 3);
        let enc = encrypt_image(&img, &key(rng.random(), Transform::Shf, m)).unwrap();
        let hist = |d: &[u8]| {
            let mut h = [0u32; 256];
            for &v in d {
                h[v as usize] += 1;
            }
            h
        };
        assert_eq!(hist(img.data()), hist(enc.data()));
        assert_eq!((enc.height(), enc.width(), enc.channels()), (32, 32, 3));
    }
}

#[test]
fn roundtrips_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let img = random_image(&mut rng, 32, 32, 3);
        for t in Transform::ALL {
            let k = key(rng.random(), t, [4, 8, 16][rng.random_range(0..3)]);
            let c = Cipher::new(k, 3).unwrap();
            assert_eq!(c.decrypt(&c.encrypt(&img).unwrap()).unwrap(), img);
        }
    }
}

#[test]
fn ffx_tables_are_bijections_with_matching_inverses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let k = key(rng.random(), Transform::Ffx, 4);
        let TransformTables::Ffx { forward, inverse } = derive_tables(&k, 3).unwrap() else {
            unreachable!()
        };
        for (f, i) in forward.iter().zip(&inverse) {
            for v in 0..=255u8 {
                assert_eq!(i[f[v as usize] as usize], v);
            }
        }
    }
}

/// Independent Feistel evaluation straight from SHA-256, for the golden vector.
fn oracle_ffx_table(seed: u128, position: u64) -> [u8; 256] {
    let f = |round: u64, half: u8| -> u8 {
        let mut h = Sha256::new();
        h.update(seed.to_be_bytes());
        h.update((b"block-feistel".len() as u32).to_le_bytes());
        h.update(b"block-feistel");
        h.update((position * 8 + round).to_le_bytes());
        let d = h.finalize();
        d[half as usize] & 0x0f
    };
    let mut table = [0u8; 256];
    for v in 0..=255u8 {
        let (mut l, mut r) = (v >> 4, v & 0x0f);
        for round in 0..8 {
            let n = l ^ f(round, r);
            l = r;
            r = n;
        }
        table[v as usize] = (l << 4) | r;
    }
    table
}

const GOLDEN_SEED: u128 = 0x0102_0304_0506_0708_090A_0B0C_0D0E_0F;
const GOLDEN_FFX_INDEX0: &str = concat!(
    "5921f26f46a6207f1906b83f0c34ab607b6e8e140254c490ba641c84ad26f6cb",
    "856b2778e58cda359eb5942dc08b17368216d0b6dcf0bf7041acaed9ec492210",
    "9b09ea9f727a9940c828e6869a3e0123431ade55931218e1630b62ebed4fb42e",
    "7c7d1bbd732b4c6c8fa3b0b7154a880f2a91f5c9cc9632e866fa242ce78d38a9",
    "e3771d696db35803f789aac2fce0256afe7900f131e22fcac1c5b13ad6a10752",
    "cfd43b75d8fd56b2df801fd2c7cd74efeed550ff7e4508b9443c4748929d9830",
    "c35ee4f4a41e4b114e53655129fb33a597a03781394d1361c65a8a71a276af0d",
    "bce95bbe68d18705a7573da8f9ced30a9cf8dd83d7675fbb0e5d95f3045cdb42",
);

fn hex(bytes: &[u8]) -> alloc::string::String {
    bytes.iter().map(|b| alloc::format!("{b:02x}")).collect()
}

#[test]
fn ffx_golden_table_for_index_zero() {
    let k = key(GOLDEN_SEED, Transform::Ffx, 4);
    let TransformTables::Ffx { forward, .. } = derive_tables(&k, 3).unwrap() else {
        unreachable!()
    };
    let oracle = oracle_ffx_table(GOLDEN_SEED, 0);
    assert_eq!(forward[0], oracle);
    assert_eq!(hex(&forward[0]), GOLDEN_FFX_INDEX0);
}

#[test]
fn different_keys_scramble_most_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in [Transform::Shf, Transform::Ffx] {
        let mut frac = 0.0;
        let trials = 50;
        for _ in 0..trials {
            let img = random_image(&mut rng, 32, 32, 3);
            let a = encrypt_image(&img, &key(rng.random(), t, 8)).unwrap();
            let b = encrypt_image(&img, &key(rng.random(), t, 8)).unwrap();
            let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
            frac += diff as f64 / a.data().len() as f64;
        }
        assert!(frac / trials as f64 > 0.9, "{t}: {}", frac / trials as f64);
    }
}

#[test]
fn pullback_matches_the_transform_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w, c) = (8, 8, 3);
    // SHF: pullback is the transpose of the (linear) permutation map
    let shf = Cipher::new(key(rng.random(), Transform::Shf, 4), c).unwrap();
    let grad: Vec<f32> = (0..h * w * c).map(|_| rng.random::<f32>() - 0.5).collect();
    let back = shf.pullback(h, w, &grad).unwrap();
    let img = random_image(&mut rng, h, w, c);
    let enc = shf.encrypt(&img).unwrap();
    // <grad, enc(x)> == <pullback(grad), x> for a linear permutation
    let lhs: f64 = grad.iter().zip(enc.data()).map(|(&g, &v)| g as f64 * v as f64).sum();
    let rhs: f64 = back.iter().zip(img.data()).map(|(&g, &v)| g as f64 * v as f64).sum();
    assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    // NP: negated exactly at flipped positions
    let np = Cipher::new(key(rng.random(), Transform::Np, 4), c).unwrap();
    let back = np.pullback(h, w, &grad).unwrap();
    let flat = ImageU8::new(h, w, c, vec![0; h * w * c]).unwrap();
    let flipped = np.encrypt(&flat).unwrap();
    for ((&g, &b), &v) in grad.iter().zip(&back).zip(flipped.data()) {
        assert_eq!(b, if v == 255 { -g } else { g });
    }
    let ffx = Cipher::new(key(1, Transform::Ffx, 4), c).unwrap();
    assert_eq!(ffx.pullback(h, w, &grad).unwrap_err(), CryptoError::GradientUnavailable);
}

#[test]
fn quantization_rounds_and_clamps() {
    assert_eq!(image::quantize(-0.2), 0);
    assert_eq!(image::quantize(1.7), 255);
    assert_eq!(image::quantize(0.5), 128);
    assert_eq!(image::quantize(10.0 / 255.0), 10);
    let chw = [0.0, 1.0, 0.5, 0.25];
    let img = ImageU8::from_unit_chw(2, 1, 2, &chw).unwrap();
    assert_eq!(img.data(), &[0, 128, 255, 64]);
    let back = img.to_unit_chw();
    assert_eq!(back[1], 1.0);
}
