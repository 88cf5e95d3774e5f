//! Little-endian binary primitives shared by checkpoints, reference caches
//! and dataset feature files.
//!
//! Every file starts with an 8-byte magic tag followed by a `u32` format
//! version. Floats are always stored as IEEE-754 binary64, little-endian, so a
//! value written and read back is bit-identical.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub struct BinWriter<W: Write> {
    inner: W,
}

impl<W: Write> BinWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        self.inner.write_all(magic)?;
        self.u32(FORMAT_VERSION)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    /// Raw values without a length prefix.
    pub fn f64_slice(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 8);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.inner.write_all(&buf)?;
        Ok(())
    }

    /// `u64` length followed by the values.
    pub fn f64_vec(&mut self, values: &[f64]) -> Result<()> {
        self.u64(values.len() as u64)?;
        self.f64_slice(values)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub struct BinReader<R: Read> {
    inner: R,
}

impl<R: Read> BinReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        let mut got = [0u8; 8];
        self.inner.read_exact(&mut got)?;
        if &got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64_slice(&mut self, len: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        self.inner.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| Error::Format("length overflow".into()))?;
        if len > (1 << 32) {
            return Err(Error::Format(format!("implausible vector length {len}")));
        }
        self.f64_slice(len)
    }

    /// Fails unless the stream is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes".into())),
        }
    }
}
