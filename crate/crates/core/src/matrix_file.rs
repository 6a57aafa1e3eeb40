//! Binary image of a [`TrigramMatrix`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes   "AD3G"
//! version  u16       1
//! vocab    u32
//! flags    u8        0
//! count    u64       number of contexts
//! per context, ascending (first, second):
//!   first  u32, second u32, entries u16,
//!   entries x (token u32, weight f64)  in table order
//! checksum u64       FNV-1a over every preceding byte
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::TokenId;
use crate::trigram::{TrigramMatrix, DEFAULT_RETENTION};

pub const MAGIC: [u8; 4] = *b"AD3G";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 1 + 8;
const CHECKSUM_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum MatrixFileError {
    #[error("not a matrix file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported matrix file version {0}")]
    UnsupportedVersion(u16),
    #[error("matrix file truncated: {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed matrix file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

impl TrigramMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * 10 + self.entry_count() * 12 + 8);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_size().to_le_bytes());
        out.push(0);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (&(a, b), table) in self.contexts() {
            out.extend_from_slice(&a.0.to_le_bytes());
            out.extend_from_slice(&b.0.to_le_bytes());
            out.extend_from_slice(&(table.len() as u16).to_le_bytes());
            for &(t, w) in table.entries() {
                out.extend_from_slice(&t.0.to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MatrixFileError> {
        if bytes.len() < 4 {
            return Err(MatrixFileError::Truncated("missing magic".into()));
        }
        let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
        if magic != MAGIC {
            return Err(MatrixFileError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(MatrixFileError::Truncated(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u16()?;
        if version != VERSION {
            return Err(MatrixFileError::UnsupportedVersion(version));
        }
        let vocab_size = cur.u32()?;
        let _flags = cur.u8()?;
        let count = cur.u64()?;

        // walk the structure first so a short file reports as truncated
        let mut probe = Cursor { bytes, pos: cur.pos };
        for _ in 0..count {
            probe.skip(8)?;
            let n = probe.u16()? as usize;
            probe.skip(n * 12)?;
        }
        let body_end = probe.pos;
        if bytes.len() < body_end + CHECKSUM_LEN {
            return Err(MatrixFileError::Truncated("checksum missing".into()));
        }
        if bytes.len() > body_end + CHECKSUM_LEN {
            return Err(MatrixFileError::Malformed(format!(
                "{} trailing bytes after checksum",
                bytes.len() - body_end - CHECKSUM_LEN
            )));
        }
        let stored = Cursor { bytes, pos: body_end }.u64()?;
        let computed = fnv1a64(&bytes[..body_end]);
        if stored != computed {
            return Err(MatrixFileError::ChecksumMismatch { stored, computed });
        }

        let mut contexts = std::collections::BTreeMap::new();
        let mut widest = 0usize;
        let mut prev = None;
        for _ in 0..count {
            let ctx = (TokenId(cur.u32()?), TokenId(cur.u32()?));
            if prev.is_some_and(|p| p >= ctx) {
                return Err(MatrixFileError::Malformed("contexts out of order".into()));
            }
            prev = Some(ctx);
            let n = cur.u16()? as usize;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let t = TokenId(cur.u32()?);
                let w = cur.f64()?;
                if !(w > 0.0 && w.is_finite()) {
                    return Err(MatrixFileError::Malformed(format!("non-positive weight {w}")));
                }
                entries.push((t, w));
            }
            let raw = entries.clone();
            let table = TrigramMatrix::table_from_raw(entries)
                .ok_or_else(|| MatrixFileError::Malformed("empty continuation table".into()))?;
            if table.entries() != raw.as_slice() {
                return Err(MatrixFileError::Malformed("continuations not in canonical order".into()));
            }
            widest = widest.max(n);
            contexts.insert(ctx, table);
        }
        Ok(TrigramMatrix::from_parts(contexts, vocab_size, None, DEFAULT_RETENTION.max(widest)))
    }

    pub fn save<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self, MatrixFileError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self, MatrixFileError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], MatrixFileError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            MatrixFileError::Truncated(format!("need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn skip(&mut self, n: usize) -> Result<(), MatrixFileError> {
        self.take(n).map(|_| ())
    }

    fn u8(&mut self) -> Result<u8, MatrixFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MatrixFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, MatrixFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, MatrixFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, MatrixFileError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrigramCounts;

    fn ids(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&i| TokenId(i)).collect()
    }

    fn sample() -> TrigramMatrix {
        let mut c = TrigramCounts::new();
        c.count_trigrams(&ids(&[0, 1, 2, 0, 1, 3]));
        TrigramMatrix::finalize(&c, 1).unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_roundtrip() {
        let m = TrigramMatrix::empty(7);
        let back = TrigramMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.vocab_size(), 7);
        assert_eq!(m.to_bytes().len(), HEADER_LEN + CHECKSUM_LEN);
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], &[0x41, 0x44, 0x33, 0x47]);
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(u32::from_le_bytes(b[6..10].try_into().unwrap()), 4);
        assert_eq!(b[10], 0);
        assert_eq!(u64::from_le_bytes(b[11..19].try_into().unwrap()), 3);
    }

    #[test]
    fn roundtrip_preserves_conditionals() {
        let m = sample();
        let back = TrigramMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        for (&ctx, _) in m.contexts() {
            assert_eq!(back.conditional(ctx), m.conditional(ctx));
        }
    }

    #[test]
    fn flipped_weight_byte_is_checksum_mismatch() {
        let mut b = sample().to_bytes();
        // first entry weight of the first context starts after 10 context bytes + 4 token bytes
        b[HEADER_LEN + 10 + 4] ^= 0x40;
        assert!(matches!(
            TrigramMatrix::from_bytes(&b),
            Err(MatrixFileError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn distinct_load_errors() {
        let good = sample().to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(TrigramMatrix::from_bytes(&bad_magic), Err(MatrixFileError::BadMagic(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(
            TrigramMatrix::from_bytes(&bad_version),
            Err(MatrixFileError::UnsupportedVersion(9))
        ));
        assert!(matches!(
            TrigramMatrix::from_bytes(&good[..good.len() - 20]),
            Err(MatrixFileError::Truncated(_))
        ));
        let mut bad_sum = good.clone();
        *bad_sum.last_mut().unwrap() ^= 1;
        assert!(matches!(
            TrigramMatrix::from_bytes(&bad_sum),
            Err(MatrixFileError::ChecksumMismatch { .. })
        ));
    }
}
