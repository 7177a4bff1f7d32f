//! Little-endian byte reader shared by the binary file decoders.

use crate::error::{Error, Result};

pub(crate) struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    context: &'static str,
}

impl<'b> Reader<'b> {
    pub fn new(bytes: &'b [u8], context: &'static str) -> Self {
        Self { bytes, pos: 0, context }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.context,
                format!("truncated: needed {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `u32` length followed by that many utf-8 bytes.
    pub fn string(&mut self, max_len: usize) -> Result<String> {
        let n = self.u32()?;
        if n > max_len {
            return Err(Error::format(self.context, format!("string length {n} too long")));
        }
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.context, "string is not utf-8"))
    }

    /// `n` little-endian floats.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .filter(|&b| b <= self.remaining())
            .ok_or_else(|| Error::format(self.context, format!("{n} values exceed the remaining data")))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}
