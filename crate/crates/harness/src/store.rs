//! On-disk artifacts: checkpoint files, adversarial-batch directories and
//! image files. Artifacts are written to a temporary name and renamed into
//! place, so a path either holds a complete artifact or nothing.

use std::fs;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use aetransfer_core::attack::{AdversarialBatch, AttackConfig, AttackKind, Monotone, ObjectiveTrace};
use aetransfer_core::crypto::ImageU8;
use aetransfer_core::model::{decode_checkpoint, encode_checkpoint, Classifier, ModelError};
use aetransfer_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> StoreError {
    StoreError::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, StoreError> {
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<String, StoreError> {
    let bytes = encode_checkpoint(model);
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Loads a checkpoint and returns it with the SHA-256 of the file.
pub fn load_checkpoint(path: &Path) -> Result<(Classifier, String), StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let model = decode_checkpoint(&bytes).map_err(|source| StoreError::Model {
        path: path.to_path_buf(),
        source,
    })?;
    Ok((model, sha256_hex(&bytes)))
}

/// Attack hyperparameters as recorded in a batch manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub kind: String,
    pub epsilon: f32,
    pub n_iter: usize,
    pub n_restarts: usize,
    pub n_target_classes: usize,
    pub seed: u64,
    pub apgd_alpha: f32,
    pub apgd_rho: f32,
    pub fab_alpha_max: f32,
    pub fab_beta: f32,
    pub fab_eta: f32,
    pub square_p_init: f32,
}

impl From<&AttackConfig> for AttackRecord {
    fn from(c: &AttackConfig) -> Self {
        AttackRecord {
            kind: c.kind.as_str().to_string(),
            epsilon: c.epsilon,
            n_iter: c.n_iter,
            n_restarts: c.n_restarts,
            n_target_classes: c.n_target_classes,
            seed: c.seed,
            apgd_alpha: c.apgd_alpha,
            apgd_rho: c.apgd_rho,
            fab_alpha_max: c.fab_alpha_max,
            fab_beta: c.fab_beta,
            fab_eta: c.fab_eta,
            square_p_init: c.square_p_init,
        }
    }
}

impl AttackRecord {
    pub fn to_config(&self) -> Result<AttackConfig, String> {
        Ok(AttackConfig {
            kind: self.kind.parse::<AttackKind>().map_err(|e| e.to_string())?,
            epsilon: self.epsilon,
            n_iter: self.n_iter,
            n_restarts: self.n_restarts,
            n_target_classes: self.n_target_classes,
            seed: self.seed,
            apgd_alpha: self.apgd_alpha,
            apgd_rho: self.apgd_rho,
            fab_alpha_max: self.fab_alpha_max,
            fab_beta: self.fab_beta,
            fab_eta: self.fab_eta,
            square_p_init: self.square_p_init,
        })
    }
}

pub const BATCH_FORMAT: u32 = 1;
const MANIFEST: &str = "manifest.json";
const ORIGINALS: &str = "originals.f32";
const ADVERSARIALS: &str = "adversarials.f32";
const FINAL_LOSS: &str = "final_loss.f32";
const TRACES: &str = "traces.bin";

/// `manifest.json` of an adversarial-batch directory. Tensors live next to
/// it as raw little-endian f32 files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub format: u32,
    pub attack: AttackRecord,
    pub model_checksum: String,
    pub first_index: usize,
    /// `[N, C, H, W]`
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub success: Vec<bool>,
    pub queries: Option<Vec<u32>>,
    /// SHA-256 of every sibling file.
    pub files: std::collections::BTreeMap<String, String>,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32s(path: &Path, bytes: &[u8]) -> Result<Vec<f32>, StoreError> {
    if bytes.len() % 4 != 0 {
        return Err(format_err(path, "length is not a multiple of 4"));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Instrumentation: objective traces, then FAB's successful-iterate norms.
fn encode_traces(batch: &AdversarialBatch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((batch.traces.len() as u32).to_le_bytes());
    for t in &batch.traces {
        out.extend((t.image as u32).to_le_bytes());
        out.push(match t.direction {
            Monotone::NonDecreasing => 0,
            Monotone::NonIncreasing => 1,
        });
        out.extend((t.values.len() as u32).to_le_bytes());
        out.extend(f32_bytes(&t.values));
    }
    out.extend((batch.fab_norms.len() as u32).to_le_bytes());
    for n in &batch.fab_norms {
        out.extend((n.len() as u32).to_le_bytes());
        out.extend(f32_bytes(n));
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], StoreError> {
        if self.bytes.len() < n {
            return Err(format_err(self.path, "truncated"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, StoreError> {
        let path = self.path;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err(path, "length overflow"))?)?;
        f32s(path, bytes)
    }
}

fn decode_traces(path: &Path, bytes: &[u8]) -> Result<(Vec<ObjectiveTrace>, Vec<Vec<f32>>), StoreError> {
    let mut c = Cursor { path, bytes };
    let n = c.u32()?;
    let mut traces = Vec::new();
    for _ in 0..n {
        let image = c.u32()?;
        let direction = match c.take(1)?[0] {
            0 => Monotone::NonDecreasing,
            1 => Monotone::NonIncreasing,
            d => return Err(format_err(path, format!("unknown trace direction {d}"))),
        };
        let len = c.u32()?;
        traces.push(ObjectiveTrace {
            image,
            direction,
            values: c.f32s(len)?,
        });
    }
    let m = c.u32()?;
    let mut norms = Vec::new();
    for _ in 0..m {
        let len = c.u32()?;
        norms.push(c.f32s(len)?);
    }
    if !c.bytes.is_empty() {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok((traces, norms))
}

/// Writes a batch directory and returns the manifest's SHA-256.
pub fn save_batch(batch: &AdversarialBatch, model_checksum: &str, dir: &Path) -> Result<String, StoreError> {
    let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
    let mut files = std::collections::BTreeMap::new();
    for (name, bytes) in [
        (ORIGINALS, f32_bytes(batch.originals.data())),
        (ADVERSARIALS, f32_bytes(batch.adversarials.data())),
        (FINAL_LOSS, f32_bytes(&batch.final_loss)),
        (TRACES, encode_traces(batch)),
    ] {
        let p = tmp.join(name);
        fs::write(&p, &bytes).map_err(io_err(&p))?;
        files.insert(name.to_string(), sha256_hex(&bytes));
    }
    let manifest = BatchManifest {
        format: BATCH_FORMAT,
        attack: AttackRecord::from(&batch.config),
        model_checksum: model_checksum.into(),
        first_index: batch.first_index,
        shape: batch.originals.shape().to_vec(),
        labels: batch.labels.clone(),
        success: batch.success.clone(),
        queries: batch.queries.clone(),
        files,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let p = tmp.join(MANIFEST);
    fs::write(&p, &json).map_err(io_err(&p))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&tmp, dir).map_err(io_err(dir))?;
    Ok(sha256_hex(&json))
}

/// Reads a batch directory, verifying every file checksum.
pub fn load_batch(dir: &Path) -> Result<(AdversarialBatch, BatchManifest), StoreError> {
    let mpath = dir.join(MANIFEST);
    let json = fs::read(&mpath).map_err(io_err(&mpath))?;
    let m: BatchManifest = serde_json::from_slice(&json).map_err(|e| format_err(&mpath, e.to_string()))?;
    if m.format != BATCH_FORMAT {
        return Err(format_err(&mpath, format!("unsupported batch format {}", m.format)));
    }
    let read = |name: &str| -> Result<Vec<u8>, StoreError> {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        if m.files.get(name).map(String::as_str) != Some(sha256_hex(&bytes).as_str()) {
            return Err(format_err(&p, "checksum mismatch"));
        }
        Ok(bytes)
    };
    let n = m.labels.len();
    let tensor = |name: &str| -> Result<Tensor, StoreError> {
        let p = dir.join(name);
        Tensor::new(m.shape.clone(), f32s(&p, &read(name)?)?).map_err(|e| format_err(&p, e.to_string()))
    };
    let originals = tensor(ORIGINALS)?;
    let adversarials = tensor(ADVERSARIALS)?;
    let final_loss = f32s(&dir.join(FINAL_LOSS), &read(FINAL_LOSS)?)?;
    let (traces, fab_norms) = decode_traces(&dir.join(TRACES), &read(TRACES)?)?;
    if m.shape.first() != Some(&n) || m.success.len() != n || final_loss.len() != n {
        return Err(format_err(&mpath, "per-image fields disagree on the image count"));
    }
    let config = m.attack.to_config().map_err(|e| format_err(&mpath, e))?;
    let batch = AdversarialBatch {
        kind: config.kind,
        config,
        first_index: m.first_index,
        originals,
        adversarials,
        labels: m.labels.clone(),
        success: m.success.clone(),
        final_loss,
        queries: m.queries.clone(),
        traces,
        fab_norms,
    };
    Ok((batch, m))
}

pub fn write_png(img: &ImageU8, path: &Path) -> Result<(), StoreError> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(format_err(path, format!("cannot write {c}-channel PNG"))),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    w.write_image_data(img.data()).map_err(|e| format_err(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<ImageU8, StoreError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(f));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        other => return Err(format_err(path, format!("unsupported PNG colour type {other:?}"))),
    };
    ImageU8::new(h, w, 3, data).map_err(|e| format_err(path, e.to_string()))
}

/// Raw HWC bytes; the geometry is not stored in the file.
pub fn read_raw(path: &Path, height: usize, width: usize, channels: usize) -> Result<ImageU8, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    ImageU8::new(height, width, channels, bytes).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_raw(img: &ImageU8, path: &Path) -> Result<(), StoreError> {
    write_atomic(path, img.data())
}
