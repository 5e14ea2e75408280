//! Little-endian framing shared by the weight and checkpoint formats. Every
//! file ends in a CRC32 of all preceding bytes.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn len_u32(&mut self, n: usize) -> Result<()> {
        let v = u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} exceeds u32")))?;
        self.u32(v);
        Ok(())
    }

    /// Appends the CRC32 trailer and returns the finished file.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Reader over the body of a framed file (everything before the CRC).
/// Callers parse the structure first, so a short file reports truncation,
/// then call [`Reader::verify`] before trusting any of the values.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    stored_crc: u32,
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic and returns a reader positioned after it.
    pub fn open(file: &'a [u8], magic: &'static [u8], kind: &'static str) -> Result<Self> {
        if file.len() < magic.len() {
            return Err(Error::Truncated(format!("{kind}: {} bytes", file.len())));
        }
        if &file[..magic.len()] != magic {
            return Err(Error::BadMagic(kind));
        }
        if file.len() < magic.len() + 4 {
            return Err(Error::Truncated(format!("{kind}: no checksum")));
        }
        let (body, tail) = file.split_at(file.len() - 4);
        Ok(Self {
            buf: body,
            stored_crc: u32::from_le_bytes(tail.try_into().unwrap()),
            pos: magic.len(),
        })
    }

    /// Requires the whole body to be consumed and the checksum to match.
    pub fn verify(&self, kind: &str) -> Result<()> {
        self.expect_end(kind)?;
        let computed = crc32fast::hash(self.buf);
        if computed != self.stored_crc {
            return Err(Error::CrcMismatch {
                stored: self.stored_crc,
                computed,
            });
        }
        Ok(())
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed(format!("array length {n} overflows")))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self, kind: &str) -> Result<()> {
        if self.is_empty() {
            Ok(())
        } else {
            Err(Error::Malformed(format!(
                "{kind}: {} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}
