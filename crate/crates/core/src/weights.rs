//! Named parameter bundles and the `PSMW` binary weight format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PSMW" | version: u32 | entry count: u32
//! per entry: name len: u32 | UTF-8 name | rows: u32 | cols: u32 | rows*cols f64 (LE)
//! CRC32 (IEEE) of every preceding byte: u32
//! ```
//!
//! Entries are written in lexicographic name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use crate::error::{PsmError, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"PSMW";
pub const FORMAT_VERSION: u32 = 1;

/// `(name, rows, cols)` triples a bundle must match exactly.
pub type Manifest = Vec<(String, usize, usize)>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    entries: BTreeMap<String, Matrix>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; a duplicate name is rejected.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(PsmError::ManifestMismatch(format!("duplicate name `{name}`")));
        }
        self.entries.insert(name, m);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| PsmError::MissingWeight(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn manifest(&self) -> Manifest {
        self.iter()
            .map(|(k, m)| (k.to_string(), m.rows(), m.cols()))
            .collect()
    }

    /// Checks that names and shapes match `expected` exactly (order-insensitive).
    pub fn check_manifest(&self, expected: &[(String, usize, usize)]) -> Result<()> {
        let mut want: Vec<_> = expected.to_vec();
        want.sort();
        let have = self.manifest();
        if have.len() != want.len() {
            return Err(PsmError::ManifestMismatch(format!(
                "expected {} entries, found {}",
                want.len(),
                have.len()
            )));
        }
        for (h, w) in have.iter().zip(&want) {
            if h != w {
                return Err(PsmError::ManifestMismatch(format!(
                    "expected {} {}x{}, found {} {}x{}",
                    w.0, w.1, w.2, h.0, h.1, h.2
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(PsmError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(PsmError::CorruptFile("truncated header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4-byte tail"));

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PsmError::UnsupportedVersion(version));
        }
        if crc32fast::hash(body) != stored {
            return Err(PsmError::CorruptFile("CRC mismatch".into()));
        }
        let count = r.u32()? as usize;
        let mut bundle = WeightBundle::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| PsmError::CorruptFile("entry name is not UTF-8".into()))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| PsmError::CorruptFile("shape overflow".into()))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| PsmError::CorruptFile("shape overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            bundle.insert(name, Matrix::from_vec(rows, cols, data)?)?;
        }
        if r.pos != body.len() {
            return Err(PsmError::CorruptFile("trailing bytes after entries".into()));
        }
        Ok(bundle)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| PsmError::CorruptFile("unexpected end of file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_weights(w: &WeightBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, w.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => PsmError::MissingFile(path.to_path_buf()),
        _ => PsmError::Io(e),
    })?;
    WeightBundle::from_bytes(&bytes)
}

/// Loads a bundle and validates it against `manifest`.
pub fn load_weights_checked(path: impl AsRef<Path>, manifest: &[(String, usize, usize)]) -> Result<WeightBundle> {
    let w = load_weights(path)?;
    w.check_manifest(manifest)?;
    Ok(w)
}
