//! Small file and binary-format helpers shared by the on-disk interfaces.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Write `bytes` to `path` atomically: temp file in the same directory, then
/// rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Cursor over a binary file with format-error context.
pub struct BinReader<'a> {
    path: &'a Path,
    inner: std::io::Cursor<Vec<u8>>,
}

impl<'a> BinReader<'a> {
    pub fn open(path: &'a Path) -> Result<Self> {
        Ok(BinReader {
            path,
            inner: std::io::Cursor::new(read_file(path)?),
        })
    }

    pub fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        })
    }

    fn ctx(&self, what: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: format!("truncated while reading {what}"),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8], what: &str) -> Result<()> {
        let mut buf = [0u8; 8];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.ctx("magic"))?;
        if &buf != magic {
            return self.fail(format!("not a {what} file (bad magic)"));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, supported: u32) -> Result<()> {
        let v = self.read_u32("version")?;
        if v != supported {
            return self.fail(format!("unsupported version {v} (supported: {supported})"));
        }
        Ok(())
    }

    pub fn read_u8(&mut self, what: &str) -> Result<u8> {
        self.inner.read_u8().map_err(|_| self.ctx(what))
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        self.inner
            .read_u32::<LittleEndian>()
            .map_err(|_| self.ctx(what))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        self.inner
            .read_u64::<LittleEndian>()
            .map_err(|_| self.ctx(what))
    }

    pub fn read_f64(&mut self, what: &str) -> Result<f64> {
        self.inner
            .read_f64::<LittleEndian>()
            .map_err(|_| self.ctx(what))
    }

    pub fn read_f64_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.read_f64(what)?);
        }
        Ok(out)
    }

    pub fn read_f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(
                self.inner
                    .read_f32::<LittleEndian>()
                    .map_err(|_| self.ctx(what))?,
            );
        }
        Ok(out)
    }

    pub fn read_string(&mut self, what: &str) -> Result<String> {
        let len = self.read_u32(what)? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf).map_err(|_| self.ctx(what))?;
        String::from_utf8(buf).map_err(|_| self.ctx(what))
    }

    pub fn expect_eof(&mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf) {
            Ok(0) => Ok(()),
            _ => self.fail("trailing bytes after payload"),
        }
    }
}

/// Builder for the same binary encoding.
#[derive(Default)]
pub struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = BinWriter { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.write_u32(version);
        w
    }

    pub fn write_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn write_u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).unwrap();
    }

    pub fn write_u64(&mut self, v: u64) {
        self.buf.write_u64::<LittleEndian>(v).unwrap();
    }

    pub fn write_f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).unwrap();
    }

    pub fn write_f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.write_f64(v);
        }
    }

    pub fn write_f32_slice(&mut self, vs: &[f32]) {
        for &v in vs {
            self.buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }

    pub fn write_string(&mut self, s: &str) {
        self.write_u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.buf)
    }
}
