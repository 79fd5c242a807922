//! Binary embedding files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DALR"
//! 4       4     version (u32, currently 1)
//! 8       1     dtype code (u8, 0 = float32)
//! 9       8     n rows (u64)
//! 17      4     d columns (u32)
//! 21      4nd   row-major IEEE-754 float32 payload
//! ```
//!
//! Each file has a UTF-8 sidecar at `<path>.meta` holding `key=value` lines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::EmbeddingBatch;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DALR";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 21;

/// Sidecar metadata; keys are case-sensitive.
pub type Metadata = BTreeMap<String, String>;

pub const META_SOURCE: &str = "source";
pub const META_NORMALIZED: &str = "normalized";
pub const META_SEED: &str = "seed";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes the batch and a sidecar recording only its normalization flag.
pub fn save_embeddings(batch: &EmbeddingBatch, path: &Path) -> Result<()> {
    let mut meta = Metadata::new();
    meta.insert(META_NORMALIZED.into(), batch.is_normalized().to_string());
    save_embeddings_with_meta(batch, path, &meta)
}

pub fn save_embeddings_with_meta(
    batch: &EmbeddingBatch,
    path: &Path,
    meta: &Metadata,
) -> Result<()> {
    let d = u32::try_from(batch.d())
        .map_err(|_| Error::format(path, format!("{} columns exceed u32", batch.d())))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + batch.n() * batch.d() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(batch.n() as u64).to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for &v in batch.view().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
    write_metadata(&sidecar_path(path), meta)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingBatch> {
    load_embeddings_with_meta(path).map(|(b, _)| b)
}

/// Loads a batch and its sidecar. A missing sidecar yields empty metadata.
/// When the sidecar says `normalized=true`, row norms are verified.
pub fn load_embeddings_with_meta(path: &Path) -> Result<(EmbeddingBatch, Metadata)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != EMBEDDING_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected \"DALR\"", String::from_utf8_lossy(magic)),
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    let n = r.u64()? as usize;
    let d = r.u32()? as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::format(path, "payload size overflows"))?;
    let payload = r.rest();
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, expected {expected} for {n}x{d}",
                payload.len()
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    let data = Array2::from_shape_vec((n, d), values).expect("length checked above");

    let meta_path = sidecar_path(path);
    let meta = if meta_path.exists() {
        read_metadata(&meta_path)?
    } else {
        Metadata::new()
    };
    let mut batch = EmbeddingBatch::new(data)?;
    if meta.get(META_NORMALIZED).map(String::as_str) == Some("true") {
        batch = batch
            .assume_normalized()
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok((batch, meta))
}

pub fn write_metadata(path: &Path, meta: &Metadata) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n', '\r']) || v.contains(['\n', '\r']) {
            return Err(Error::format(path, format!("unrepresentable metadata entry {k:?}")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(&text).map_err(|reason| Error::format(path, reason))
}

pub(crate) fn parse_metadata(text: &str) -> std::result::Result<Metadata, String> {
    let mut meta = Metadata::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {} has no `=`", lineno + 1))?;
        meta.insert(k.to_owned(), v.to_owned());
    }
    Ok(meta)
}

/// Cursor over a byte buffer that reports truncation as a format error.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(self.path, format!("truncated at byte {}", self.bytes.len()))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
