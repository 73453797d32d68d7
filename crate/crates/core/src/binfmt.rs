//! Little-endian primitives shared by the PGDS and PGCK readers/writers.

use crate::error::FormatError;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or_else(|| FormatError::Malformed(format!("length {n} overflows")))?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                expected: end,
                actual: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let have = &self.buf[..self.buf.len().min(4)];
        if have != &expected[..have.len()] {
            return Err(FormatError::BadMagic {
                expected: *expected,
                found: have.to_vec(),
            });
        }
        self.take(4).map(|_| ())
    }

    pub fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let found = self.u32()?;
        if found != expected {
            return Err(FormatError::UnsupportedVersion { expected, found });
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len32(&mut self) -> Result<usize, FormatError> {
        Ok(self.u32()? as usize)
    }

    pub fn string(&mut self) -> Result<String, FormatError> {
        let n = self.len32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>, FormatError> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| FormatError::Malformed(format!("element count {count} overflows")))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.buf.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes after offset {}",
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
