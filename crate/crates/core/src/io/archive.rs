//! Binary embedding archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XVD1" | version u8 = 1 | dim u32 | count u64
//! count × ( key_len u16 | key bytes (UTF-8) | dim × f32 )
//! ```
//!
//! Values are widened to `f64` on read and narrowed on write.

use std::collections::HashSet;
use std::path::Path;

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::tensor::Vector;

pub const MAGIC: &[u8; 4] = b"XVD1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 8;

/// A reader/writer for one on-disk embedding format.
pub trait ArchiveFormat {
    fn read(&self, path: &Path) -> Result<Vec<Embedding>>;
    fn write(&self, set: &[Embedding], path: &Path) -> Result<()>;
}

/// The native `XVD1` format.
#[derive(Debug, Clone, Copy, Default)]
pub struct XvdArchive;

impl ArchiveFormat for XvdArchive {
    fn read(&self, path: &Path) -> Result<Vec<Embedding>> {
        read_archive(path)
    }

    fn write(&self, set: &[Embedding], path: &Path) -> Result<()> {
        write_archive(set, path)
    }
}

pub fn read_archive(path: &Path) -> Result<Vec<Embedding>> {
    decode(&super::read_bytes(path)?, path)
}

pub fn write_archive(set: &[Embedding], path: &Path) -> Result<()> {
    super::write_atomic(path, &encode(set)?)
}

/// Encodes `set`; the archive dim is taken from the first record (0 if empty).
pub fn encode(set: &[Embedding]) -> Result<Vec<u8>> {
    encode_with_dim(set, set.first().map_or(0, Embedding::dim))
}

pub fn encode_with_dim(set: &[Embedding], dim: usize) -> Result<Vec<u8>> {
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format(format!("dim {dim} exceeds u32")))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (2 + 16 + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for e in set {
        if !seen.insert(e.key.as_str()) {
            return Err(Error::DuplicateKey(e.key.clone()));
        }
        if e.dim() != dim {
            return Err(Error::Shape(format!(
                "embedding `{}` has dim {}, archive dim is {dim}",
                e.key,
                e.dim()
            )));
        }
        let key_len = u16::try_from(e.key.len()).map_err(|_| {
            let head: String = e.key.chars().take(16).collect();
            Error::Format(format!("key `{head}…` longer than 65535 bytes"))
        })?;
        if key_len == 0 {
            return Err(Error::Format("empty key".into()));
        }
        out.extend_from_slice(&key_len.to_le_bytes());
        out.extend_from_slice(e.key.as_bytes());
        for &v in e.vector.iter() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::Format(format!(
                    "embedding `{}` holds {v}, not representable as a finite f32",
                    e.key
                )));
            }
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, offset: usize, detail: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return self.err(
                self.pos,
                format!("truncated {what}: need {n} bytes, {remaining} left"),
            );
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self
            .take(N, what)?
            .try_into()
            .expect("take returns N bytes"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Embedding>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return c.err(0, format!("bad magic {magic:02x?}, expected \"XVD1\""));
    }
    let version = c.array::<1>("version")?[0];
    if version != VERSION {
        return c.err(
            4,
            format!("unsupported archive version {version} (expected {VERSION})"),
        );
    }
    let dim = u32::from_le_bytes(c.array("dim")?) as usize;
    let count = u64::from_le_bytes(c.array("count")?);
    let min_record = 2 + 1 + 4 * dim;
    let plausible = (bytes.len() - c.pos) / min_record;
    let mut out = Vec::with_capacity((count as usize).min(plausible));
    let mut seen = HashSet::new();
    for i in 0..count {
        let start = c.pos;
        let key_len = u16::from_le_bytes(c.array(&format!("key length of record {i}"))?) as usize;
        if key_len == 0 {
            return c.err(start, format!("record {i} has an empty key"));
        }
        let key_bytes = c.take(key_len, &format!("key of record {i}"))?;
        let key = match std::str::from_utf8(key_bytes) {
            Ok(k) => k.to_string(),
            Err(e) => return c.err(start + 2, format!("key of record {i} is not UTF-8: {e}")),
        };
        let raw = c.take(4 * dim, &format!("values of record {i} (`{key}`)"))?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("chunk of 4"))))
            .collect();
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return c.err(
                start + 2 + key_len + 4 * j,
                format!("non-finite value in `{key}`"),
            );
        }
        if !seen.insert(key.clone()) {
            return Err(Error::DuplicateKey(key));
        }
        out.push(Embedding::new(key, Vector(values)));
    }
    if c.pos != bytes.len() {
        return c.err(
            c.pos,
            format!(
                "{} trailing bytes after {count} records",
                bytes.len() - c.pos
            ),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.xvd")
    }

    fn golden() -> Vec<u8> {
        let mut b = b"XVD1".to_vec();
        b.push(1);
        b.extend_from_slice(&[2, 0, 0, 0]);
        b.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0]);
        b.extend_from_slice(&[1, 0]);
        b.push(b'a');
        b.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0f32
        b.extend_from_slice(&[0x00, 0x00, 0x00, 0x40]); // 2.0f32
        b
    }

    #[test]
    fn golden_bytes() {
        let set = vec![Embedding::new("a", vec![1.0, 2.0])];
        assert_eq!(encode(&set).unwrap(), golden());
        assert_eq!(decode(&golden(), p()).unwrap(), set);
    }

    #[test]
    fn empty_set_is_header_only() {
        let bytes = encode(&[]).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(HEADER_LEN, 17);
        assert!(decode(&bytes, p()).unwrap().is_empty());
    }

    #[test]
    fn every_truncation_is_rejected_with_an_offset() {
        let g = golden();
        for cut in 0..g.len() {
            match decode(&g[..cut], p()) {
                Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_errors() {
        let mut bad_magic = golden();
        bad_magic[0] = b'Y';
        assert!(matches!(
            decode(&bad_magic, p()),
            Err(Error::Parse { offset: 0, .. })
        ));
        let mut bad_version = golden();
        bad_version[4] = 2;
        assert!(matches!(
            decode(&bad_version, p()),
            Err(Error::Parse { offset: 4, .. })
        ));
        let mut trailing = golden();
        trailing.push(0);
        assert!(matches!(
            decode(&trailing, p()),
            Err(Error::Parse { offset: 28, .. })
        ));
        let mut overcount = golden();
        overcount[9] = 2;
        assert!(matches!(
            decode(&overcount, p()),
            Err(Error::Parse { offset: 28, .. })
        ));
    }

    #[test]
    fn duplicate_keys_are_named() {
        let set = vec![
            Embedding::new("k", vec![1.0]),
            Embedding::new("k", vec![2.0]),
        ];
        assert!(matches!(encode(&set), Err(Error::DuplicateKey(k)) if k == "k"));
        let mut bytes = encode(&set[..1]).unwrap();
        bytes[9] = 2;
        let rec = bytes[HEADER_LEN..].to_vec();
        bytes.extend_from_slice(&rec);
        assert!(matches!(decode(&bytes, p()), Err(Error::DuplicateKey(k)) if k == "k"));
    }

    #[test]
    fn write_rejects_mixed_dims_and_overflow() {
        let mixed = vec![
            Embedding::new("a", vec![1.0]),
            Embedding::new("b", vec![1.0, 2.0]),
        ];
        assert!(matches!(encode(&mixed), Err(Error::Shape(_))));
        assert!(matches!(
            encode(&[Embedding::new("a", vec![1e300])]),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            encode(&[Embedding::new("", vec![1.0])]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn file_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.xvd");
        let set: Vec<Embedding> = ["z", "b", "ü"]
            .iter()
            .enumerate()
            .map(|(i, k)| Embedding::new(*k, vec![i as f64, -0.5]))
            .collect();
        XvdArchive.write(&set, &path).unwrap();
        assert_eq!(XvdArchive.read(&path).unwrap(), set);
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(
            rows in proptest::collection::vec(proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 3), 0..20)
        ) {
            let set: Vec<Embedding> = rows.iter().enumerate()
                .map(|(i, r)| Embedding::new(format!("k{i}"), r.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
                .collect();
            let bytes = encode_with_dim(&set, 3).unwrap();
            let back = decode(&bytes, p()).unwrap();
            prop_assert_eq!(encode_with_dim(&back, 3).unwrap(), bytes);
            for (a, b) in back.iter().zip(&set) {
                prop_assert_eq!(&a.key, &b.key);
                for (x, y) in a.vector.iter().zip(b.vector.iter()) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
