//! Little-endian framing shared by every on-disk format: a 4-byte magic,
//! typed fields, and a trailing CRC32 over everything before it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn len_u32(&mut self, v: usize) -> Result<&mut Self> {
        let v = u32::try_from(v).map_err(|_| Error::dim(format!("{v} does not fit in u32")))?;
        Ok(self.u32(v))
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    /// Length-prefixed block.
    pub fn block(&mut self, b: &[u8]) -> Result<&mut Self> {
        self.len_u32(b.len())?;
        Ok(self.bytes(b))
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<&mut Self> {
        t.write_to(&mut self.buf)?;
        Ok(self)
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Malformed("file too short".into()));
        }
        if &bytes[..4] != magic {
            return Err(Error::Malformed(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(Self { bytes, pos: 4 })
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn block(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Malformed(format!("tensor rank {rank} is implausible")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = self.u32()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::Malformed("tensor size overflows".into()))?;
            shape.push(d);
        }
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Malformed("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }

    /// Requires exactly the CRC to remain, then verifies it.
    pub fn finish(self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest != 4 {
            return Err(Error::Malformed(format!(
                "expected 4 trailing checksum bytes, found {rest}"
            )));
        }
        let stored = u32::from_le_bytes(self.bytes[self.pos..].try_into().unwrap());
        let computed = crc32fast::hash(&self.bytes[..self.pos]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}
