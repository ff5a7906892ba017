//! Little-endian byte encoding shared by the dataset, checkpoint and index
//! file formats. Readers report the byte offset of the first failure.

use crate::error::{MbvrError, Result};

#[derive(Debug, Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Appends `payload` prefixed with its length as a `u32`.
    pub fn record(&mut self, payload: &[u8]) {
        self.u32(payload.len() as u32);
        self.bytes(payload);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0, base: 0 }
    }

    /// A reader over a sub-slice whose errors report offsets in the parent.
    fn nested(buf: &'a [u8], base: u64) -> Self {
        Reader { buf, pos: 0, base }
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    pub fn error(&self, message: impl Into<String>) -> MbvrError {
        MbvrError::format(self.offset(), message)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated: needed {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        let start = self.offset();
        let got = self.take(magic.len())?;
        if let Some(i) = got.iter().zip(magic).position(|(a, b)| a != b) {
            return Err(MbvrError::format(
                start + i as u64,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u32) -> Result<()> {
        let start = self.offset();
        let got = self.u32()?;
        if got != version {
            return Err(MbvrError::format(
                start,
                format!("unsupported version {got}, expected {version}"),
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error("length overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let start = self.offset();
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| MbvrError::format(start, "string is not valid UTF-8"))
    }

    /// Reads a length-prefixed record and returns a reader over its payload.
    pub fn record(&mut self) -> Result<Reader<'a>> {
        let len = self.u32()? as usize;
        let base = self.offset();
        let payload = self.take(len)?;
        Ok(Reader::nested(payload, base))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(format!("{} unexpected trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Lowercase hex SHA-256 prefix used to stamp artifacts.
pub(crate) fn short_hash(bytes: &[u8]) -> String {
    checksum(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// First 8 bytes of SHA-256, stored after file headers to detect corruption.
pub(crate) fn checksum(bytes: &[u8]) -> [u8; 8] {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("digest is 32 bytes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_reports_offset() {
        let mut w = Writer::new();
        w.u32(7);
        let bytes = w.into_inner();
        let mut r = Reader::new(&bytes[..3]);
        match r.u32() {
            Err(MbvrError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nested_records_report_parent_offsets() {
        let mut inner = Writer::new();
        inner.u8(9);
        let mut w = Writer::new();
        w.bytes(b"AB");
        w.record(&inner.into_inner());
        let bytes = w.into_inner();
        let mut r = Reader::new(&bytes);
        r.take(2).unwrap();
        let mut rec = r.record().unwrap();
        assert_eq!(rec.u8().unwrap(), 9);
        match rec.u8() {
            Err(MbvrError::Format { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("unexpected {other:?}"),
        }
    }
}
