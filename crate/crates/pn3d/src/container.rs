//! Binary named-array container shared by body-model files, checkpoints and
//! parameter exports.
//!
//! Layout: 7-byte ASCII magic, version `u32`, then a sequence of arrays until
//! EOF. Each array: name length `u32`, UTF-8 name, dtype tag `u32`
//! (1 = f64, 2 = u8), rank `u32`, extents as `u64`s, row-major payload.
//! All integers little-endian. Arrays are written sorted by name so a
//! write/read/write cycle is byte-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BODY_MODEL_MAGIC: &[u8; 7] = b"PN3D-BM";
pub const CHECKPOINT_MAGIC: &[u8; 7] = b"PN3D-CP";
pub const EXPORT_MAGIC: &[u8; 7] = b"PN3D-EX";
pub const CONTAINER_VERSION: u32 = 1;

const DTYPE_F64: u32 = 1;
const DTYPE_U8: u32 = 2;

/// A named dense array: f64 payload with shape, or raw bytes (rank-1).
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub arrays: BTreeMap<String, Payload>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "payload size mismatch");
        self.arrays.insert(name.to_string(), Payload::F64 { shape: shape.to_vec(), data });
    }

    pub fn put_bytes(&mut self, name: &str, data: Vec<u8>) {
        self.arrays.insert(name.to_string(), Payload::Bytes(data));
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.arrays.get(name) {
            Some(Payload::F64 { shape, data }) => Ok((shape, data)),
            Some(Payload::Bytes(_)) => Err(Error::Schema(format!("array `{name}` has byte dtype, expected f64"))),
            None => Err(Error::Schema(format!("missing required array `{name}`"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.arrays.get(name) {
            Some(Payload::Bytes(b)) => Ok(b),
            Some(Payload::F64 { .. }) => Err(Error::Schema(format!("array `{name}` has f64 dtype, expected bytes"))),
            None => Err(Error::Schema(format!("missing required array `{name}`"))),
        }
    }

    pub fn write(&self, path: &Path, magic: &[u8; 7]) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path.display().to_string(), e);
        w.write_all(magic).map_err(io)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes()).map_err(io)?;
        for (name, payload) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            match payload {
                Payload::F64 { shape, data } => {
                    w.write_all(&DTYPE_F64.to_le_bytes()).map_err(io)?;
                    w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
                    for &e in shape {
                        w.write_all(&(e as u64).to_le_bytes()).map_err(io)?;
                    }
                    for &v in data {
                        w.write_all(&v.to_le_bytes()).map_err(io)?;
                    }
                }
                Payload::Bytes(data) => {
                    w.write_all(&DTYPE_U8.to_le_bytes()).map_err(io)?;
                    w.write_all(&1u32.to_le_bytes()).map_err(io)?;
                    w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
                    w.write_all(data).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path, expect_magic: &[u8; 7]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Tracked { inner: BufReader::new(file), offset: 0 };

        let mut magic = [0u8; 7];
        r.read_exact_at(&mut magic)?;
        if &magic != expect_magic {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&magic),
                    String::from_utf8_lossy(expect_magic)
                ),
            });
        }
        let version = r.read_u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format { offset: 7, detail: format!("unsupported version {version}") });
        }

        let mut arrays = BTreeMap::new();
        loop {
            let at = r.offset;
            let name_len = match r.try_read_u32()? {
                Some(v) => v,
                None => break, // clean EOF
            };
            if name_len > 4096 {
                return Err(Error::Format { offset: at, detail: format!("implausible name length {name_len}") });
            }
            let mut name_buf = vec![0u8; name_len as usize];
            r.read_exact_at(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Format { offset: at, detail: "array name is not UTF-8".into() })?;
            let dtype = r.read_u32()?;
            let rank = r.read_u32()?;
            if rank > 8 {
                return Err(Error::Format { offset: at, detail: format!("implausible rank {rank}") });
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(r.read_u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            match dtype {
                DTYPE_F64 => {
                    let mut data = vec![0f64; numel];
                    for v in data.iter_mut() {
                        let mut b = [0u8; 8];
                        r.read_exact_at(&mut b)?;
                        *v = f64::from_le_bytes(b);
                    }
                    arrays.insert(name, Payload::F64 { shape, data });
                }
                DTYPE_U8 => {
                    if rank != 1 {
                        return Err(Error::Format { offset: at, detail: "byte arrays must be rank 1".into() });
                    }
                    let mut data = vec![0u8; numel];
                    r.read_exact_at(&mut data)?;
                    arrays.insert(name, Payload::Bytes(data));
                }
                other => {
                    return Err(Error::Format { offset: at, detail: format!("unknown dtype tag {other}") });
                }
            }
        }
        Ok(Container { arrays })
    }
}

struct Tracked<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Tracked<R> {
    fn read_exact_at(&mut self, buf: &mut [u8]) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Format { offset: at, detail: format!("truncated read: {e}") })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Returns None on clean EOF at a record boundary.
    fn try_read_u32(&mut self) -> Result<Option<u32>> {
        let mut b = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self
                .inner
                .read(&mut b[filled..])
                .map_err(|e| Error::Format { offset: self.offset, detail: format!("read failed: {e}") })?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(Error::Format { offset: self.offset, detail: "truncated record header".into() });
            }
            filled += n;
            self.offset += n as u64;
        }
        Ok(Some(u32::from_le_bytes(b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");

        let mut c = Container::new();
        c.put_f64("zeta", &[2, 3], vec![1.0, -2.5, 3.0, 0.0, f64::MIN_POSITIVE, 1e300]);
        c.put_f64("alpha", &[4], vec![0.1, 0.2, 0.3, 0.4]);
        c.put_bytes("meta.note", b"hello".to_vec());

        c.write(&p1, EXPORT_MAGIC).unwrap();
        let back = Container::read(&p1, EXPORT_MAGIC).unwrap();
        assert_eq!(back, c);
        back.write(&p2, EXPORT_MAGIC).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let c = Container::new();
        c.write(&p, BODY_MODEL_MAGIC).unwrap();
        let err = Container::read(&p, CHECKPOINT_MAGIC).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let mut c = Container::new();
        c.put_f64("w", &[8], vec![1.0; 8]);
        c.write(&p, EXPORT_MAGIC).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 9]).unwrap();
        let err = Container::read(&p, EXPORT_MAGIC).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "got {err:?}");
    }
}
