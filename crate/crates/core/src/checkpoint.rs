//! `MOS1` binary container for backbones, adapters and Gaussian class statistics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOS1"            4 bytes
//! version           u16
//! kind              u32   (1 backbone, 2 adapter, 3 gaussian stats)
//! header_len        u32   number of u32 header words
//! payload_len       u32   number of f32 payload values
//! header            header_len × u32
//! payload           payload_len × f32, row-major
//! ```
//!
//! Every file gets a sibling `<file>.json` manifest with the same header words.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{MosError, Result};

pub const MAGIC: &[u8; 4] = b"MOS1";
pub const VERSION: u16 = 1;

/// Bytes before the header words.
pub const PREAMBLE_BYTES: usize = 4 + 2 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Backbone = 1,
    Adapter = 2,
    GaussianStats = 3,
}

impl PayloadKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(PayloadKind::Backbone),
            2 => Some(PayloadKind::Adapter),
            3 => Some(PayloadKind::GaussianStats),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: PayloadKind,
    pub header: Vec<u32>,
    pub payload: Vec<f32>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u16,
    kind: PayloadKind,
    header: &'a [u32],
    payload_values: usize,
    bytes: usize,
}

impl Container {
    pub fn byte_len(&self) -> usize {
        PREAMBLE_BYTES + 4 * self.header.len() + 4 * self.payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        for h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(MosError::format(path, "missing MOS1 magic"));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(MosError::format(path, format!("unsupported version {version}")));
        }
        let kind = r.u32()?;
        let kind = PayloadKind::from_u32(kind)
            .ok_or_else(|| MosError::format(path, format!("unknown payload kind {kind}")))?;
        let header_len = r.u32()? as usize;
        let payload_len = r.u32()? as usize;
        let expected = PREAMBLE_BYTES + 4 * header_len + 4 * payload_len;
        if bytes.len() != expected {
            return Err(MosError::format(
                path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let header = (0..header_len).map(|_| r.u32()).collect::<Result<_>>()?;
        let payload = (0..payload_len)
            .map(|_| r.u32().map(f32::from_bits))
            .collect::<Result<_>>()?;
        Ok(Container { kind, header, payload })
    }

    pub fn expect_kind(&self, kind: PayloadKind, path: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(MosError::format(
                path,
                format!("expected a {kind:?} checkpoint, found {:?}", self.kind),
            ));
        }
        Ok(())
    }

    pub fn header_array<const N: usize>(&self, path: &Path) -> Result<[u32; N]> {
        self.header
            .get(..N)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| MosError::format(path, format!("header shorter than {N} words")))
    }

    /// Writes the container and its JSON manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        let manifest = Manifest {
            format: "MOS1",
            version: VERSION,
            kind: self.kind,
            header: &self.header,
            payload_values: self.payload.len(),
            bytes: self.byte_len(),
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        fs::write(manifest_path(path), json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| MosError::format(self.path, "truncated file"))?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// `<path>.json`
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Hex SHA-256 over the exact bit patterns of a sequence of reals.
pub fn digest(values: impl Iterator<Item = f64>) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
