//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `AETCKPT\0`, format version `u32`, architecture
//! code `u8`, train seed `u64`, epochs `u64`, train/test accuracy as `f32`
//! (NaN when absent), key flag `u8` followed by transform code `u8`, block
//! size `u32` and 16 seed bytes when set, parameter count `u32`, then per
//! parameter: name length `u32`, UTF-8 name, rank `u32`, dims `u64` each, data
//! `f32` each. The file ends with the SHA-256 of everything before it.

use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use super::classifier::{Classifier, TrainingSummary};
use super::network::ParamStore;
use super::spec::{Architecture, ModelSpec};
use super::ModelError;
use crate::crypto::{EncryptionKey, Transform};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"AETCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn encode(model: &Classifier) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.spec().architecture.code());
    out.extend_from_slice(&model.train_seed().to_le_bytes());
    let s = model.summary();
    out.extend_from_slice(&(s.epochs as u64).to_le_bytes());
    for acc in [s.train_accuracy, s.test_accuracy] {
        out.extend_from_slice(&acc.unwrap_or(f32::NAN).to_le_bytes());
    }
    match model.key() {
        None => out.push(0),
        Some(k) => {
            out.push(1);
            out.push(k.transform.code());
            out.extend_from_slice(&(k.block_size as u32).to_le_bytes());
            out.extend_from_slice(&k.seed_bytes());
        }
    }
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Corrupt("dimension overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Classifier, ModelError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated.into());
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < MAGIC.len() + 4 {
        return Err(CheckpointError::Truncated.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version }.into());
    }
    if bytes.len() < 12 + 32 {
        return Err(CheckpointError::Truncated.into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        // A short file usually fails here too; report the more specific cause
        // when the body cannot be parsed at all.
        return Err(match parse(body) {
            Err(ModelError::Checkpoint(CheckpointError::Truncated)) => CheckpointError::Truncated,
            _ => CheckpointError::ChecksumMismatch,
        }
        .into());
    }
    parse(body)
}

fn parse(body: &[u8]) -> Result<Classifier, ModelError> {
    let mut r = Reader { buf: &body[12..] };
    let arch = r.u8()?;
    let architecture =
        Architecture::from_code(arch).ok_or_else(|| CheckpointError::Corrupt(alloc::format!("architecture code {arch}")))?;
    let train_seed = r.u64()?;
    let epochs = r.u64()? as usize;
    let acc = |v: f32| (!v.is_nan()).then_some(v);
    let summary = TrainingSummary {
        epochs,
        train_accuracy: acc(r.f32()?),
        test_accuracy: acc(r.f32()?),
    };
    let key = match r.u8()? {
        0 => None,
        1 => {
            let code = r.u8()?;
            let transform = Transform::from_code(code)
                .ok_or_else(|| CheckpointError::Corrupt(alloc::format!("transform code {code}")))?;
            let block = r.u32()? as usize;
            let seed = u128::from_be_bytes(r.array()?);
            Some(EncryptionKey::new(seed, transform, block)?)
        }
        f => return Err(CheckpointError::Corrupt(alloc::format!("key flag {f}")).into()),
    };
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(alloc::format!("rank {rank}")).into());
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.buf.len()))
            .ok_or(CheckpointError::Truncated)?;
        let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        params.insert(name.into(), Tensor::new(dims, data)?);
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()).into());
    }
    Classifier::new(ModelSpec::new(architecture), params, key, train_seed, summary)
}
