//! Small shared helpers: hashing and little-endian file plumbing.

use crate::{Error, Result};
use std::io::Read;
use std::path::Path;

/// FNV-1a 64-bit hash. Used as the cheap artifact fingerprint stored inside
/// datastore and neighbor files.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fingerprint of a file on disk (FNV-1a over its bytes).
pub fn file_fingerprint(path: &Path) -> Result<u64> {
    let mut f = std::fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(fnv1a64(&buf))
}

/// SHA-256 of a byte slice as lowercase hex. Used for run-manifest content hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// SHA-256 content hash of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(sha256_hex(&bytes))
}

/// Incremental little-endian writer over a byte buffer.
#[derive(Default)]
pub struct LeWriter {
    buf: Vec<u8>,
}

impl LeWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Zero-pad to the next multiple of `align`.
    pub fn pad_to(&mut self, align: usize) {
        while self.buf.len() % align != 0 {
            self.buf.push(0);
        }
    }
}

/// Cursor-style little-endian reader with truncation checks.
pub struct LeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: String,
}

impl<'a> LeReader<'a> {
    pub fn new(bytes: &'a [u8], name: &str) -> Self {
        Self {
            bytes,
            pos: 0,
            name: name.to_string(),
        }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(self.name.clone()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Skip padding up to the next multiple of `align`.
    pub fn align_to(&mut self, align: usize) -> Result<()> {
        while self.pos % align != 0 {
            self.take(1)?;
        }
        Ok(())
    }
}

/// Round `n` up to the next multiple of `align`.
pub fn align_up(n: usize, align: usize) -> usize {
    n.div_ceil(align) * align
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_known_vectors() {
        // Reference values for the 64-bit FNV-1a parameters.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn le_round_trip() {
        let mut w = LeWriter::new();
        w.u32(7);
        w.u64(1 << 40);
        w.f32(1.5);
        w.f64(-2.25);
        w.pad_to(8);
        let bytes = w.into_bytes();
        assert_eq!(bytes.len() % 8, 0);

        let mut r = LeReader::new(&bytes, "buf");
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.u64().unwrap(), 1 << 40);
        assert_eq!(r.f32().unwrap(), 1.5);
        assert_eq!(r.f64().unwrap(), -2.25);
    }

    #[test]
    fn reader_reports_truncation() {
        let mut r = LeReader::new(&[1, 2, 3], "short");
        assert!(matches!(r.u32(), Err(Error::Truncated(_))));
    }
}
