//! Versioned binary containers for checkpoints, factors and masks, plus
//! JSON helpers. Every write goes through a temp file and a rename.
//!
//! Container layout (little endian):
//! `b"LEANKBIN"`, `u32` version, `u8` kind, `u32` header length, JSON
//! header, then each array listed in the header back to back (`f64` or
//! `u8` elements).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::mask::{BinaryChannelMask, ChannelDims, ScalingFactors};
use crate::model::{ModelConfig, ToyTransformer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LEANKBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ArtifactKind {
    Checkpoint = 1,
    Alpha = 2,
    Beta = 3,
}

impl ArtifactKind {
    fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Checkpoint),
            2 => Some(Self::Alpha),
            3 => Some(Self::Beta),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F64,
    U8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dims: Option<ChannelDims>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keep_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
    arrays: Vec<ArrayEntry>,
}

enum Payload<'a> {
    F64(&'a [f64]),
    U8(&'a [u8]),
}

fn encode(kind: ArtifactKind, header: &Header, payloads: &[Payload<'_>]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(17 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in payloads {
        match p {
            Payload::F64(xs) => {
                for x in *xs {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::U8(bs) => out.extend_from_slice(bs),
        }
    }
    Ok(out)
}

enum Array {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn decode(bytes: &[u8], expected: ArtifactKind) -> Result<(Header, Vec<Array>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a leank container"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
    }
    let kind_byte = r.take(1, "kind")?[0];
    match ArtifactKind::from_u8(kind_byte) {
        Some(k) if k == expected => {}
        _ => {
            r.pos -= 1;
            return Err(r.fail(format!("artifact kind {kind_byte} where {:?} was expected", expected)));
        }
    }
    let hlen = r.u32("header length")? as usize;
    let header_start = r.pos;
    let header: Header = serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| Error::Format {
        offset: header_start as u64,
        message: format!("malformed header: {e}"),
    })?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let n: usize = entry.shape.iter().product();
        match entry.dtype {
            Dtype::F64 => {
                let raw = r.take(n * 8, &entry.name)?;
                arrays.push(Array::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ));
            }
            Dtype::U8 => arrays.push(Array::U8(r.take(n, &entry.name)?.to_vec())),
        }
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
    }
    Ok((header, arrays))
}

fn f64_array(a: Array, name: &str) -> Result<Vec<f64>> {
    match a {
        Array::F64(v) => Ok(v),
        Array::U8(_) => Err(invalid(format!("array {name} should be f64"))),
    }
}

pub fn encode_checkpoint(model: &ToyTransformer) -> Result<Vec<u8>> {
    let named = model.named_tensors();
    let header = Header {
        config: Some(model.config.clone()),
        dims: None,
        keep_ratio: None,
        r: None,
        arrays: named
            .iter()
            .map(|(n, t)| ArrayEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                dtype: Dtype::F64,
            })
            .collect(),
    };
    let payloads: Vec<Payload<'_>> = named.iter().map(|(_, t)| Payload::F64(t.data())).collect();
    encode(ArtifactKind::Checkpoint, &header, &payloads)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ToyTransformer> {
    let (header, arrays) = decode(bytes, ArtifactKind::Checkpoint)?;
    let config = header.config.ok_or_else(|| invalid("checkpoint header lacks a model config"))?;
    let tensors = header
        .arrays
        .iter()
        .zip(arrays)
        .map(|(e, a)| Ok((e.name.clone(), Tensor::new(e.shape.clone(), f64_array(a, &e.name)?)?)))
        .collect::<Result<Vec<_>>>()?;
    ToyTransformer::from_tensors(config, tensors)
}

pub fn encode_alpha(alpha: &ScalingFactors) -> Result<Vec<u8>> {
    let header = Header {
        config: None,
        dims: Some(alpha.dims()),
        keep_ratio: None,
        r: None,
        arrays: vec![ArrayEntry {
            name: "alpha".into(),
            shape: alpha.values.shape().to_vec(),
            dtype: Dtype::F64,
        }],
    };
    encode(ArtifactKind::Alpha, &header, &[Payload::F64(alpha.values.data())])
}

fn check_dims(found: ChannelDims, expected: Option<ChannelDims>) -> Result<()> {
    match expected {
        Some(e) if e != found => Err(invalid(format!("file dims {found:?} do not match model dims {e:?}"))),
        _ => Ok(()),
    }
}

pub fn decode_alpha(bytes: &[u8], expected: Option<ChannelDims>) -> Result<ScalingFactors> {
    let (header, mut arrays) = decode(bytes, ArtifactKind::Alpha)?;
    let dims = header.dims.ok_or_else(|| invalid("alpha header lacks dims"))?;
    check_dims(dims, expected)?;
    if arrays.len() != 1 || header.arrays[0].shape != dims.shape() {
        return Err(invalid("alpha file must hold one L x n_kv x d array"));
    }
    let data = f64_array(arrays.remove(0), "alpha")?;
    ScalingFactors::from_tensor(Tensor::new(dims.shape().to_vec(), data)?)
}

pub fn encode_beta(beta: &BinaryChannelMask) -> Result<Vec<u8>> {
    let header = Header {
        config: None,
        dims: Some(beta.dims),
        keep_ratio: Some(beta.keep_ratio),
        r: Some(beta.r),
        arrays: vec![ArrayEntry {
            name: "beta".into(),
            shape: beta.dims.shape().to_vec(),
            dtype: Dtype::U8,
        }],
    };
    encode(ArtifactKind::Beta, &header, &[Payload::U8(&beta.bits)])
}

/// Decodes a mask and enforces its invariants (bits in {0,1}, per-head
/// counts multiples of r).
pub fn decode_beta(bytes: &[u8], expected: Option<ChannelDims>) -> Result<BinaryChannelMask> {
    let (header, mut arrays) = decode(bytes, ArtifactKind::Beta)?;
    let dims = header.dims.ok_or_else(|| invalid("beta header lacks dims"))?;
    check_dims(dims, expected)?;
    let (Some(r), Some(keep_ratio)) = (header.r, header.keep_ratio) else {
        return Err(invalid("beta header lacks r or keep_ratio"));
    };
    if arrays.len() != 1 || header.arrays[0].shape != dims.shape() {
        return Err(invalid("beta file must hold one L x n_kv x d array"));
    }
    let bits = match arrays.remove(0) {
        Array::U8(b) => b,
        Array::F64(_) => return Err(invalid("beta bits must be u8")),
    };
    BinaryChannelMask::new(dims, bits, r, keep_ratio)
}

/// Writes `bytes` via a sibling temp file and rename, creating parent dirs.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &ToyTransformer) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyTransformer> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn save_alpha(path: &Path, alpha: &ScalingFactors) -> Result<()> {
    atomic_write(path, &encode_alpha(alpha)?)
}

pub fn load_alpha(path: &Path, expected: Option<ChannelDims>) -> Result<ScalingFactors> {
    decode_alpha(&fs::read(path)?, expected)
}

pub fn save_beta(path: &Path, beta: &BinaryChannelMask) -> Result<()> {
    atomic_write(path, &encode_beta(beta)?)
}

pub fn load_beta(path: &Path, expected: Option<ChannelDims>) -> Result<BinaryChannelMask> {
    decode_beta(&fs::read(path)?, expected)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, &to_json(value)?)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
