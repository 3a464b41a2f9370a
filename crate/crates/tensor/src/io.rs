//! Binary tensor records and keyed tensor archives.
//!
//! A record is `u32 LE header length | JSON header {shape, dtype} | payload`
//! with the payload stored row-major in little-endian order. Float payloads
//! are `f32` or `f64`; masks use `u8`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::{Real, Tensor};

const ARCHIVE_MAGIC: &[u8; 8] = b"SMAGARC1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Header {
    shape: Vec<usize>,
    dtype: String,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

fn put_header(out: &mut Vec<u8>, shape: &[usize], dtype: &str) {
    let header = serde_json::to_vec(&Header {
        shape: shape.to_vec(),
        dtype: dtype.to_string(),
    })
    .expect("header serializes");
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    put_header(out, t.shape(), T::DTYPE);
    out.reserve(t.len() * T::BYTES);
    for &v in t.data() {
        v.put_le(out);
    }
}

pub fn encode_u8(shape: &[usize], data: &[u8], out: &mut Vec<u8>) {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    put_header(out, shape, "u8");
    out.extend_from_slice(data);
}

/// Parses one record from the front of `bytes`; returns it and the bytes consumed.
fn parse_record(bytes: &[u8]) -> Result<(Header, &[u8], usize)> {
    if bytes.len() < 4 {
        return Err(bad("truncated record: missing header length"));
    }
    let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let rest = &bytes[4..];
    if hlen > rest.len() {
        return Err(bad(format!(
            "header length {} exceeds remaining {} bytes",
            hlen,
            rest.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| bad(format!("bad header: {e}")))?;
    let elem = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        "u8" => 1,
        other => return Err(bad(format!("unsupported dtype {other}"))),
    };
    let numel: usize = header.shape.iter().product();
    let plen = numel * elem;
    let payload = &rest[hlen..];
    if payload.len() < plen {
        return Err(bad(format!(
            "truncated payload: need {} bytes, have {}",
            plen,
            payload.len()
        )));
    }
    Ok((header, &payload[..plen], 4 + hlen + plen))
}

fn decode_floats<T: Real>(header: &Header, payload: &[u8]) -> Result<Tensor<T>> {
    let data: Vec<T> = match header.dtype.as_str() {
        "f32" => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::get_le(c) as f64))
            .collect(),
        "f64" => payload.chunks_exact(8).map(|c| T::lit(f64::get_le(c))).collect(),
        other => return Err(bad(format!("expected a float record, found {other}"))),
    };
    Tensor::new(header.shape.clone(), data)
}

fn exact(bytes: &[u8], used: usize) -> Result<()> {
    if used != bytes.len() {
        return Err(bad(format!("{} trailing bytes after record", bytes.len() - used)));
    }
    Ok(())
}

/// Decodes a single float record occupying all of `bytes`.
pub fn decode_tensor<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (header, payload, used) = parse_record(bytes)?;
    exact(bytes, used)?;
    decode_floats(&header, payload)
}

/// Decodes a single `u8` record occupying all of `bytes`.
pub fn decode_u8(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let (header, payload, used) = parse_record(bytes)?;
    exact(bytes, used)?;
    if header.dtype != "u8" {
        return Err(bad(format!("expected a u8 record, found {}", header.dtype)));
    }
    Ok((header.shape, payload.to_vec()))
}

pub fn write_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Keyed collection of tensor records plus free-form JSON metadata.
///
/// Layout: magic `SMAGARC1`, `u32` metadata length, metadata JSON, `u32`
/// entry count, then per entry `u32` key length, UTF-8 key, tensor record.
/// Entries are kept sorted by key so the encoding is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    entries: BTreeMap<String, Vec<u8>>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert<T: Real>(&mut self, key: impl Into<String>, t: &Tensor<T>) {
        let mut buf = Vec::new();
        encode_tensor(t, &mut buf);
        self.entries.insert(key.into(), buf);
    }

    pub fn get<T: Real>(&self, key: &str) -> Result<Tensor<T>> {
        let bytes = self
            .entries
            .get(key)
            .ok_or_else(|| bad(format!("archive has no entry `{key}`")))?;
        decode_tensor(bytes)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (key, rec) in &self.entries {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(rec);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
            if *pos + n > bytes.len() {
                return Err(bad("truncated archive"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        }
        fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<usize> {
            let b = take(bytes, pos, 4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        }
        let mut pos = 0;
        if take(bytes, &mut pos, 8)? != ARCHIVE_MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let mlen = take_u32(bytes, &mut pos)?;
        let meta = serde_json::from_slice(take(bytes, &mut pos, mlen)?)
            .map_err(|e| bad(format!("bad archive metadata: {e}")))?;
        let count = take_u32(bytes, &mut pos)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let klen = take_u32(bytes, &mut pos)?;
            let key = String::from_utf8(take(bytes, &mut pos, klen)?.to_vec())
                .map_err(|_| bad("archive key is not UTF-8"))?;
            let (_, _, used) = parse_record(&bytes[pos..]).map_err(|e| bad(format!("entry `{key}`: {e}")))?;
            entries.insert(key, bytes[pos..pos + used].to_vec());
            pos += used;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after archive"));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
