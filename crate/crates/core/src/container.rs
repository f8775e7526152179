//! Shared little-endian framing for the binary containers (`NDVF`, `NDKP`,
//! `NDIX`): four magic bytes, a version byte, a length-prefixed JSON header,
//! then raw payload.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{NdvrError, Result};

pub(crate) const VERSION: u8 = 0x01;

/// Upper bound on header size; anything larger is treated as corruption.
const MAX_HEADER_BYTES: u32 = 16 * 1024 * 1024;

pub(crate) struct Writer<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> Writer<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    pub(crate) fn bytes(&mut self, buf: &[u8]) -> Result<()> {
        self.inner.write_all(buf)?;
        self.written += buf.len() as u64;
        Ok(())
    }

    pub(crate) fn preamble<H: Serialize>(&mut self, magic: &[u8; 4], header: &H) -> Result<()> {
        self.bytes(magic)?;
        self.bytes(&[VERSION])?;
        let json = serde_json::to_vec(header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| NdvrError::Validation("header too large".into()))?;
        self.u32(len)?;
        self.bytes(&json)
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f32s(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    /// Narrows to float32 on the way out.
    pub(crate) fn f64s_as_f32(&mut self, values: &[f64]) -> Result<()> {
        let narrowed: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        self.f32s(&narrowed)
    }

    pub(crate) fn finish(mut self) -> Result<u64> {
        self.inner.flush()?;
        Ok(self.written)
    }
}

pub(crate) struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub(crate) fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    fn exact(&mut self, buf: &mut [u8], context: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                NdvrError::Corrupt(format!("{} truncated while reading {context}", self.what))
            } else {
                NdvrError::Io(e)
            }
        })
    }

    pub(crate) fn preamble<H: DeserializeOwned>(&mut self, magic: &[u8; 4]) -> Result<H> {
        let mut found = [0u8; 4];
        self.inner.read_exact(&mut found).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                NdvrError::Format(format!("{} too short for magic bytes", self.what))
            } else {
                NdvrError::Io(e)
            }
        })?;
        if &found != magic {
            return Err(NdvrError::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut version = [0u8; 1];
        self.exact(&mut version, "version")?;
        if version[0] != VERSION {
            return Err(NdvrError::Format(format!(
                "unsupported {} version {:#04x}",
                self.what, version[0]
            )));
        }
        let len = self.u32("header length")?;
        if len > MAX_HEADER_BYTES {
            return Err(NdvrError::Corrupt(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        self.exact(&mut json, "header")?;
        serde_json::from_slice(&json)
            .map_err(|e| NdvrError::Format(format!("{} header: {e}", self.what)))
    }

    pub(crate) fn u8(&mut self, context: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, context)?;
        Ok(b[0])
    }

    pub(crate) fn u32(&mut self, context: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, context)?;
        Ok(u32::from_le_bytes(b))
    }

    pub(crate) fn f64(&mut self, context: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, context)?;
        Ok(f64::from_le_bytes(b))
    }

    pub(crate) fn f32s(&mut self, n: usize, context: &str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.exact(&mut buf, context)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn f32s_as_f64(&mut self, n: usize, context: &str) -> Result<Vec<f64>> {
        Ok(self.f32s(n, context)?.into_iter().map(f64::from).collect())
    }

    /// Errors unless the source is exhausted.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(NdvrError::Corrupt(format!("trailing bytes after {}", self.what))),
        }
    }
}
