//! Little-endian helpers shared by the centroid, checkpoint and fusion file
//! formats. All of them start with a four-byte magic and a `u32` version.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.write_u32::<LittleEndian>(v).unwrap();
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LittleEndian>(v).unwrap();
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self, path: &Path) -> Result<()> {
        fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader {
    cur: Cursor<Vec<u8>>,
    path: String,
}

impl Reader {
    /// Opens `path`, checks the magic and version.
    pub fn open(path: &Path, magic: &[u8; 4], version: u32) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader {
            cur: Cursor::new(data),
            path: path.display().to_string(),
        };
        let mut got = [0u8; 4];
        r.cur.read_exact(&mut got).map_err(|_| r.malformed("file shorter than magic"))?;
        if &got != magic {
            return Err(Error::VersionMismatch {
                path: r.path.clone(),
                reason: format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(&got)
                ),
            });
        }
        let v = r.u32()?;
        if v != version {
            return Err(Error::VersionMismatch {
                path: r.path.clone(),
                reason: format!("expected version {version}, found {v}"),
            });
        }
        Ok(r)
    }

    pub fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedFile {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.malformed("truncated"))
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.malformed("truncated"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.cur
            .read_f64::<LittleEndian>()
            .map_err(|_| self.malformed("truncated"))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.remaining() < n.saturating_mul(8) {
            return Err(self.malformed(format!(
                "truncated: need {n} floats, {} bytes left",
                self.remaining()
            )));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if self.remaining() < n {
            return Err(self.malformed("truncated"));
        }
        let mut out = vec![0u8; n];
        self.cur.read_exact(&mut out).map_err(|_| self.malformed("truncated"))?;
        Ok(out)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
