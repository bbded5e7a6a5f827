//! Little-endian binary container shared by checkpoint and dataset files.
//!
//! Layout: magic `RTTA`, format version (`u32`), block kind (`u8`), then the
//! block payload. Integers are `u32`, reals are raw `f64` bits, strings are
//! length-prefixed UTF-8.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTTA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum BlockKind {
    Checkpoint = 1,
    Dataset = 2,
}

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(kind: BlockKind) -> Self {
        let mut e = Self::default();
        e.buf.extend_from_slice(MAGIC);
        e.u32(FORMAT_VERSION);
        e.u8(kind as u8);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("extent exceeds u32"));
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.usize(vs.len());
        vs.iter().for_each(|&v| self.f64(v));
    }

    pub fn usizes(&mut self, vs: &[usize]) {
        self.usize(vs.len());
        vs.iter().for_each(|&v| self.usize(v));
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Rank, dims, then the raw payload.
    pub fn tensor(&mut self, t: &Tensor) {
        self.usizes(t.shape());
        t.data().iter().for_each(|&v| self.f64(v));
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Validates the header and positions the cursor at the block payload.
    pub fn new(buf: &'a [u8], kind: BlockKind) -> Result<Self> {
        let mut d = Self { buf, pos: 0 };
        if d.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = d.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let k = d.u8()?;
        if k != kind as u8 {
            return Err(Error::Format(format!("expected block kind {}, found {k}", kind as u8)));
        }
        Ok(d)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated input".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.usizes()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_checked() {
        let mut e = Encoder::new(BlockKind::Dataset);
        e.f64(1.5);
        let bytes = e.finish();
        assert!(Decoder::new(&bytes, BlockKind::Checkpoint).is_err());
        let mut d = Decoder::new(&bytes, BlockKind::Dataset).unwrap();
        assert_eq!(d.f64().unwrap(), 1.5);
        d.finish().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Decoder::new(&bad, BlockKind::Dataset).is_err());
    }

    #[test]
    fn truncation_is_reported() {
        let mut e = Encoder::new(BlockKind::Checkpoint);
        e.tensor(&Tensor::zeros(&[2, 2]));
        let bytes = e.finish();
        let mut d = Decoder::new(&bytes[..bytes.len() - 3], BlockKind::Checkpoint).unwrap();
        assert!(d.tensor().is_err());
    }
}
