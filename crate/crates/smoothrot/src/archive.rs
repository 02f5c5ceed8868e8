//! `TARC1` tensor archive.
//!
//! Layout: the magic bytes `TARC1\n`, an 8-byte little-endian header length,
//! a UTF-8 JSON header mapping each tensor name to
//! `{dtype, shape, offset, byte_length}` (offsets relative to the payload
//! start), then the raw little-endian payload. The optional reserved header
//! key `__metadata__` holds free-form JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use smoothrot_core::Tensor;

pub const MAGIC: &[u8; 6] = b"TARC1\n";
pub const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("bad magic: not a TARC1 archive")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("shape/length mismatch for '{name}': shape {shape:?} needs {expected} bytes, header says {actual}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in tensor '{0}'")]
    NonFinite(String),
    #[error("missing entry '{0}'")]
    Missing(String),
    #[error("entry '{name}' has dtype {found}, expected {expected}")]
    WrongDtype {
        name: String,
        expected: &'static str,
        found: &'static str,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F32(Tensor),
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl Entry {
    pub fn dtype(&self) -> &'static str {
        match self {
            Entry::F32(_) => "f32",
            Entry::I32 { .. } => "i32",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F32(t) => t.shape(),
            Entry::I32 { shape, .. } => shape,
        }
    }

    fn byte_len(&self) -> usize {
        4 * match self {
            Entry::F32(t) => t.len(),
            Entry::I32 { data, .. } => data.len(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    byte_length: usize,
}

/// Named tensors plus optional JSON metadata. Names iterate in sorted order,
/// which fixes the payload layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: BTreeMap<String, Entry>,
    pub metadata: Option<Value>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_metadata(metadata: Value) -> Self {
        Self {
            entries: BTreeMap::new(),
            metadata: Some(metadata),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), Entry::F32(t));
    }

    pub fn insert_i32(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<i32>) {
        self.entries.insert(name.into(), Entry::I32 { shape, data });
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        match self.entries.get(name) {
            Some(Entry::F32(t)) => Ok(t),
            Some(e) => Err(ArchiveError::WrongDtype {
                name: name.into(),
                expected: "f32",
                found: e.dtype(),
            }),
            None => Err(ArchiveError::Missing(name.into())),
        }
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor, ArchiveError> {
        self.tensor(name)?;
        match self.entries.remove(name) {
            Some(Entry::F32(t)) => Ok(t),
            _ => unreachable!("checked above"),
        }
    }

    pub fn ints(&self, name: &str) -> Result<(&[usize], &[i32]), ArchiveError> {
        match self.entries.get(name) {
            Some(Entry::I32 { shape, data }) => Ok((shape, data)),
            Some(e) => Err(ArchiveError::WrongDtype {
                name: name.into(),
                expected: "i32",
                found: e.dtype(),
            }),
            None => Err(ArchiveError::Missing(name.into())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut header = serde_json::Map::new();
        let mut offset = 0;
        for (name, e) in &self.entries {
            if name == METADATA_KEY {
                return Err(ArchiveError::MalformedHeader(format!("'{METADATA_KEY}' is reserved")));
            }
            if let Entry::F32(t) = e {
                if t.data().iter().any(|v| !v.is_finite()) {
                    return Err(ArchiveError::NonFinite(name.clone()));
                }
            }
            let h = HeaderEntry {
                dtype: e.dtype().into(),
                shape: e.shape().to_vec(),
                offset,
                byte_length: e.byte_len(),
            };
            offset += h.byte_length;
            header.insert(name.clone(), serde_json::to_value(h).expect("plain struct"));
        }
        if let Some(m) = &self.metadata {
            header.insert(METADATA_KEY.into(), m.clone());
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("json value");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.entries.values() {
            match e {
                Entry::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::I32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(ArchiveError::MalformedHeader("missing header length".into()));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes"));
        let rest = &rest[8..];
        if hlen > rest.len() as u64 {
            return Err(ArchiveError::MalformedHeader(format!(
                "header length {hlen} exceeds the {} remaining bytes",
                rest.len()
            )));
        }
        let (hbytes, payload) = rest.split_at(hlen as usize);
        let header: Value =
            serde_json::from_slice(hbytes).map_err(|e| ArchiveError::MalformedHeader(e.to_string()))?;
        let Value::Object(map) = header else {
            return Err(ArchiveError::MalformedHeader("header is not a JSON object".into()));
        };
        let mut archive = Archive::new();
        let mut end = 0usize;
        for (name, v) in map {
            if name == METADATA_KEY {
                archive.metadata = Some(v);
                continue;
            }
            let h: HeaderEntry = serde_json::from_value(v)
                .map_err(|e| ArchiveError::MalformedHeader(format!("entry '{name}': {e}")))?;
            let count = h
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| ArchiveError::MalformedHeader(format!("entry '{name}': shape overflows")))?;
            if count != h.byte_length {
                return Err(ArchiveError::LengthMismatch {
                    name,
                    shape: h.shape,
                    expected: count,
                    actual: h.byte_length,
                });
            }
            let stop = h
                .offset
                .checked_add(h.byte_length)
                .ok_or_else(|| ArchiveError::MalformedHeader(format!("entry '{name}': offset overflows")))?;
            if stop > payload.len() {
                return Err(ArchiveError::TruncatedPayload(format!(
                    "entry '{name}' ends at byte {stop} of a {}-byte payload",
                    payload.len()
                )));
            }
            end = end.max(stop);
            let raw = &payload[h.offset..stop];
            let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
            let entry = match h.dtype.as_str() {
                "f32" => {
                    let data: Vec<f32> = words.map(f32::from_le_bytes).collect();
                    if data.iter().any(|v| !v.is_finite()) {
                        return Err(ArchiveError::NonFinite(name));
                    }
                    Entry::F32(Tensor::new(h.shape, data).expect("length checked"))
                }
                "i32" => Entry::I32 {
                    shape: h.shape,
                    data: words.map(i32::from_le_bytes).collect(),
                },
                other => {
                    return Err(ArchiveError::MalformedHeader(format!(
                        "entry '{name}': unsupported dtype '{other}'"
                    )))
                }
            };
            archive.entries.insert(name, entry);
        }
        if end != payload.len() {
            return Err(ArchiveError::TruncatedPayload(format!(
                "declared entries cover {end} bytes but the payload has {}",
                payload.len()
            )));
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
