//! Versioned binary container for named parameter arrays.
//!
//! Both the victim classifiers and the detector ensemble persist through
//! this format, so round-trips are bit-exact by construction. Layout, all
//! integers little-endian:
//!
//! ```text
//! magic      8 bytes  b"TSPARAM\0"
//! version    u32      currently 1
//! kind       u32 len + utf8 bytes     e.g. "victim-textcnn"
//! meta_len   u32
//!   repeated: key u32 len + utf8, value i64
//! param_len  u32
//!   repeated: name u32 len + utf8,
//!             ndim u32, dims u64 * ndim,
//!             values f64 * prod(dims)
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::{Real, Tensor};

const MAGIC: &[u8; 8] = b"TSPARAM\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    VersionMismatch(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("parameter {name}: expected shape {expect:?}, found {got:?}")]
    ShapeMismatch { name: String, expect: Vec<usize>, got: Vec<usize> },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("unexpected kind {got:?} (wanted {want:?})")]
    KindMismatch { want: String, got: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Vec<(String, i64)>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<i64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn take_param(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        let idx = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingParam(name.to_string()))?;
        Ok(self.params.remove(idx).1)
    }
}

pub fn save(
    path: &Path,
    kind: &str,
    meta: &[(String, i64)],
    params: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_str(&mut out, kind);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in meta {
        write_str(&mut out, k);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        write_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let kind = r.string("kind")?;
    let n_meta = r.u32("meta count")? as usize;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let key = r.string("meta key")?;
        let value = i64::from_le_bytes(r.take(8, "meta value")?.try_into().unwrap());
        meta.push((key, value));
    }
    let n_params = r.u32("param count")? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string("param name")?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(r.take(8, "dim")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(Real::from_le_bytes(r.take(8, "values")?.try_into().unwrap()));
        }
        let t = Tensor::new(shape, values).expect("shape and value count agree");
        params.push((name, t));
    }
    Ok(Checkpoint { kind, meta, params })
}

/// Check the loaded checkpoint kind before unpacking.
pub fn expect_kind(ckpt: &Checkpoint, want: &str) -> Result<(), CheckpointError> {
    if ckpt.kind != want {
        return Err(CheckpointError::KindMismatch {
            want: want.to_string(),
            got: ckpt.kind.clone(),
        });
    }
    Ok(())
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let len = self.u32(what)? as usize;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Truncated(what))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<(String, i64)>, Vec<(String, Tensor)>) {
        let meta = vec![("classes".to_string(), 2), ("hidden".to_string(), 4)];
        let params = vec![
            ("w".to_string(), Tensor::matrix(2, 3, vec![1.5, -2.0, 0.0, 3.25, 4.0, -0.5]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![0.125, -9.75])),
        ];
        (meta, params)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, params) = sample();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, "test-kind", &meta, &params).unwrap();
        let loaded = load(&p1).unwrap();
        save(&p2, &loaded.kind, &loaded.meta, &loaded.params).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOTMAGIC????").unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, params) = sample();
        let p = dir.path().join("v.ckpt");
        save(&p, "k", &meta, &params).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 99;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::VersionMismatch(99))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, params) = sample();
        let p = dir.path().join("t.ckpt");
        save(&p, "k", &meta, &params).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::Truncated(_))));
    }
}
