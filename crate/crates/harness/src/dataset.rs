//! Dataset ingestion: CIFAR-10 binary batches and a procedural stand-in.

use std::fs;
use std::path::{Path, PathBuf};

use aetransfer_core::crypto::ImageU8;
use aetransfer_core::model::LabeledImages;
use aetransfer_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

pub const CLASSES: usize = 10;
pub const SIDE: usize = 32;
pub const RECORD_LEN: usize = 1 + 3 * SIDE * SIDE;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{file}: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed record at byte offset {offset} ({len} bytes is not a multiple of {RECORD_LEN})")]
    RecordLength { file: PathBuf, offset: usize, len: usize },
    #[error("{file}: label {label} at byte offset {offset} is not below {CLASSES}")]
    Label { file: PathBuf, offset: usize, label: u8 },
    #[error("requested {requested} images but only {available} are available")]
    TooFew { requested: usize, available: usize },
}

/// Where a [`Splits`] came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Cifar10(PathBuf),
    Synthetic,
}

impl DataSource {
    pub fn describe(&self) -> String {
        match self {
            DataSource::Cifar10(p) => format!("cifar10:{}", p.display()),
            DataSource::Synthetic => "synthetic".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledImages,
    pub test: LabeledImages,
    pub source: DataSource,
}

/// Decodes every record of one CIFAR-10 binary batch file into HWC images.
pub fn read_batch_file(path: &Path) -> Result<LabeledImages, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        file: path.to_path_buf(),
        source,
    })?;
    decode_batch(path, &bytes)
}

pub fn decode_batch(path: &Path, bytes: &[u8]) -> Result<LabeledImages, DataError> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(DataError::RecordLength {
            file: path.to_path_buf(),
            offset: bytes.len() - bytes.len() % RECORD_LEN,
            len: bytes.len(),
        });
    }
    let plane = SIDE * SIDE;
    let mut images = Vec::with_capacity(bytes.len() / RECORD_LEN);
    let mut labels = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for (r, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(DataError::Label {
                file: path.to_path_buf(),
                offset: r * RECORD_LEN,
                label: rec[0],
            });
        }
        let pixels = &rec[1..];
        let mut hwc = vec![0u8; 3 * plane];
        for (p, px) in hwc.chunks_exact_mut(3).enumerate() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = pixels[c * plane + p];
            }
        }
        images.push(ImageU8::new(SIDE, SIDE, 3, hwc).expect("fixed geometry"));
        labels.push(rec[0] as usize);
    }
    Ok(LabeledImages::new(images, labels).expect("one label per image"))
}

/// Seeded class-stratified subset: `n / classes` images per class, the first
/// `n % classes` classes get one more. Selected indices keep file order.
pub fn stratified_subset(set: &LabeledImages, n: usize, seed: u64, tag: &str) -> Result<LabeledImages, DataError> {
    let mut by_class = vec![Vec::new(); CLASSES];
    for (i, &l) in set.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut chosen = Vec::with_capacity(n);
    for (c, idx) in by_class.iter_mut().enumerate() {
        let want = n / CLASSES + usize::from(c < n % CLASSES);
        if want > idx.len() {
            return Err(DataError::TooFew {
                requested: n,
                available: set.len(),
            });
        }
        let mut r = rng::stream(seed, &[rng::label("subset"), rng::label(tag), c as u64]);
        idx.shuffle(&mut r);
        chosen.extend_from_slice(&idx[..want]);
    }
    chosen.sort_unstable();
    Ok(set.subset(&chosen))
}

/// Loads stratified train/test subsets from a directory of CIFAR-10 binary
/// batches. A missing directory falls back to [`synthetic`] data.
pub fn load_cifar10(path: Option<&Path>, n_train: usize, n_test: usize, seed: u64) -> Result<Splits, DataError> {
    let dir = match path {
        Some(p) if p.join(TEST_FILE).is_file() => p,
        other => {
            if let Some(p) = other {
                log::warn!("no CIFAR-10 batches under {}; using the synthetic dataset", p.display());
            }
            return Ok(Splits {
                train: synthetic(n_train, seed, "train"),
                test: synthetic(n_test, seed, "test"),
                source: DataSource::Synthetic,
            });
        }
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in TRAIN_FILES {
        let part = read_batch_file(&dir.join(f))?;
        images.extend_from_slice(part.images());
        labels.extend_from_slice(part.labels());
    }
    let train = LabeledImages::new(images, labels).expect("one label per image");
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    Ok(Splits {
        train: stratified_subset(&train, n_train, seed, "train")?,
        test: stratified_subset(&test, n_test, seed, "test")?,
        source: DataSource::Cifar10(dir.to_path_buf()),
    })
}

/// Procedural 10-class dataset used when CIFAR-10 is not on disk.
///
/// Image `i` has label `i % 10` and depends only on `(seed, split, i)`. Each
/// image is a smooth two-colour background, one class-specific shape
/// (disk, square, triangle, ring, plus, horizontal bars, vertical bars,
/// checkerboard, two dots, diagonal cross) with random colour, opacity,
/// position, size and small rotation, and Gaussian pixel noise.
pub fn synthetic(n: usize, seed: u64, split: &str) -> LabeledImages {
    synthetic_with(&Style::default(), n, seed, split)
}

/// Rendering ranges of the synthetic dataset; each image draws uniformly
/// from every `(lo, hi)` range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Style {
    pub noise: (f32, f32),
    pub opacity: (f32, f32),
    pub scale: (f32, f32),
    /// Content is rendered at `32 / upsample` pixels and bilinearly resized.
    pub upsample: usize,
    /// Minimum mean absolute channel difference between the shape colour
    /// and the background's mid colour.
    pub contrast: f32,
}

impl Default for Style {
    fn default() -> Self {
        Style {
            noise: (0.02, 0.08),
            opacity: (0.45, 1.0),
            scale: (8.0, 13.0),
            upsample: 1,
            contrast: 0.3,
        }
    }
}

pub fn synthetic_with(style: &Style, n: usize, seed: u64, split: &str) -> LabeledImages {
    let images = (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::label("synthetic"), rng::label(split), i as u64]);
            render(style, i % CLASSES, &mut r)
        })
        .collect();
    LabeledImages::new(images, (0..n).map(|i| i % CLASSES).collect()).expect("one label per image")
}

fn color<R: Rng>(r: &mut R) -> [f32; 3] {
    [r.random(), r.random(), r.random()]
}

/// Whether local shape coordinates `(u, v)` (scaled so the shape spans
/// roughly the unit disk) lie inside the class shape.
fn inside(class: usize, u: f32, v: f32, period: f32) -> bool {
    let d = (u * u + v * v).sqrt();
    let bars = |t: f32| (t * period).rem_euclid(2.0) < 1.0;
    match class {
        0 => d < 0.9,
        1 => u.abs().max(v.abs()) < 0.75,
        2 => v < 0.6 && v > -0.8 && u.abs() < (0.6 - v) * 0.6,
        3 => (d - 0.7).abs() < 0.22,
        4 => (u.abs() < 0.25 && v.abs() < 0.9) || (v.abs() < 0.25 && u.abs() < 0.9),
        5 => u.abs().max(v.abs()) < 0.9 && bars(v),
        6 => u.abs().max(v.abs()) < 0.9 && bars(u),
        7 => u.abs().max(v.abs()) < 0.8 && (bars(u) ^ bars(v)),
        8 => ((u - 0.5).powi(2) + v * v).sqrt() < 0.35 || ((u + 0.5).powi(2) + v * v).sqrt() < 0.35,
        _ => {
            let (a, b) = ((u + v) * core::f32::consts::FRAC_1_SQRT_2, (u - v) * core::f32::consts::FRAC_1_SQRT_2);
            d < 0.95 && (a.abs() < 0.2 || b.abs() < 0.2)
        }
    }
}

fn render<R: Rng>(style: &Style, class: usize, r: &mut R) -> ImageU8 {
    let (c0, c1) = (color(r), color(r));
    let mid = [0, 1, 2].map(|c| 0.5 * (c0[c] + c1[c]));
    let fg = loop {
        let fg = color(r);
        if (0..3).map(|c| (fg[c] - mid[c]).abs()).sum::<f32>() / 3.0 >= style.contrast {
            break fg;
        }
    };
    let theta = r.random_range(0.0..core::f32::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let range = |r: &mut R, (lo, hi): (f32, f32)| if hi > lo { r.random_range(lo..hi) } else { lo };
    let opacity: f32 = range(r, style.opacity);
    let scale: f32 = range(r, style.scale);
    let (cx, cy): (f32, f32) = (r.random_range(11.0..21.0), r.random_range(11.0..21.0));
    let rot: f32 = r.random_range(-0.3..0.3);
    let (rs, rc) = rot.sin_cos();
    let period: f32 = r.random_range(2.2..3.2);
    let sigma: f32 = range(r, style.noise);
    let up = style.upsample.max(1);
    let side = SIDE / up;
    let sub = 2 * up;
    // Coarse render in full-resolution coordinates, supersampled sub x sub.
    let mut coarse = vec![0.0f32; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let mut cover = 0.0;
            for sy in 0..sub {
                for sx in 0..sub {
                    let px = (x * up) as f32 + (sx as f32 + 0.5) / sub as f32 * up as f32;
                    let py = (y * up) as f32 + (sy as f32 + 0.5) / sub as f32 * up as f32;
                    let (dx, dy) = ((px - cx) / scale, (py - cy) / scale);
                    let (u, v) = (rc * dx + rs * dy, -rs * dx + rc * dy);
                    if inside(class, u, v, period) {
                        cover += 1.0;
                    }
                }
            }
            let a = opacity * cover / (sub * sub) as f32;
            let (mx, my) = ((x as f32 + 0.5) * up as f32 - 16.0, (y as f32 + 0.5) * up as f32 - 16.0);
            let t = 0.5 + 0.5 * (mx * gx + my * gy) / 22.0;
            for c in 0..3 {
                let bg = c0[c] + (c1[c] - c0[c]) * t;
                let noise: f32 = r.sample(StandardNormal);
                coarse[(y * side + x) * 3 + c] = bg * (1.0 - a) + fg[c] * a + sigma * noise;
            }
        }
    }
    // Bilinear upsampling with pixel-centre alignment.
    let mut data = Vec::with_capacity(SIDE * SIDE * 3);
    let at = |y: usize, x: usize, c: usize| coarse[(y * side + x) * 3 + c];
    let src = |i: usize| {
        let f = ((i as f32 + 0.5) / up as f32 - 0.5).clamp(0.0, (side - 1) as f32);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(side - 1), f - i0 as f32)
    };
    for y in 0..SIDE {
        let (y0, y1, wy) = src(y);
        for x in 0..SIDE {
            let (x0, x1, wx) = src(x);
            for c in 0..3 {
                let top = at(y0, x0, c) * (1.0 - wx) + at(y0, x1, c) * wx;
                let bot = at(y1, x0, c) * (1.0 - wx) + at(y1, x1, c) * wx;
                let v = top * (1.0 - wy) + bot * wy;
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    ImageU8::new(SIDE, SIDE, 3, data).expect("fixed geometry")
}
