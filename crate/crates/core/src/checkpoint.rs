//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "UNIUIRCK"
//! version    u32      FORMAT_VERSION
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u32
//! count × {
//!   name_len u32, name (UTF-8)
//!   dtype    u8       1 = f32, 2 = f64
//!   ndim     u32, dims u64 × ndim
//!   payload  raw little-endian values, row-major
//! }
//! sha256     32 bytes over everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"UNIUIRCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    Init,
    #[serde(rename = "I")]
    StageI,
    #[serde(rename = "II")]
    StageII,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: Option<RunConfig>,
    pub stage: StageTag,
    pub iteration: u64,
    pub rng: Option<RngState>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            config: None,
            stage: StageTag::Init,
            iteration: 0,
            rng: None,
        }
    }
}

pub type NamedArrays<T> = Vec<(String, Tensor<T>)>;

pub fn encode<T: Scalar>(params: &[(String, Tensor<T>)], meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint, converting stored arrays to `T` when the stored
/// element type differs.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(NamedArrays<T>, CheckpointMeta)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let meta_len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.take(1)?[0])
            .ok_or_else(|| Error::Format(format!("array {name}: unknown dtype")))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel(&shape);
        let raw = r.take(n * dtype.size())?;
        let data: Vec<T> = match dtype {
            d if d == T::DTYPE => raw.chunks(d.size()).map(T::read_le).collect(),
            DType::F32 => raw
                .chunks(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after arrays".into()));
    }
    Ok((arrays, meta))
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(
    params: &[(String, Tensor<T>)],
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let bytes = encode(params, meta)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(NamedArrays<T>, CheckpointMeta)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_round_trips() {
        let bytes = encode::<f64>(&[], &CheckpointMeta::default()).unwrap();
        let (arrays, meta) = decode::<f64>(&bytes).unwrap();
        assert!(arrays.is_empty());
        assert_eq!(meta, CheckpointMeta::default());
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let t = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 * 0.1);
        let mut bytes = encode(&[("w".to_string(), t)], &CheckpointMeta::default()).unwrap();
        bytes.pop();
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn flipped_bit_is_a_checksum_error() {
        let t = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        let mut bytes = encode(&[("w".to_string(), t)], &CheckpointMeta::default()).unwrap();
        let k = bytes.len() - 40;
        bytes[k] ^= 1;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Checksum)));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut bytes = encode::<f64>(&[], &CheckpointMeta::default()).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(Error::Version { found: 7, expected: FORMAT_VERSION })
        ));
    }

    #[test]
    fn f32_payload_loads_as_f64() {
        let t = Tensor::<f32>::from_fn(&[5], |i| i as f32 * 0.25);
        let bytes = encode(&[("w".to_string(), t)], &CheckpointMeta::default()).unwrap();
        let (arrays, _) = decode::<f64>(&bytes).unwrap();
        assert_eq!(arrays[0].1.data(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }
}
