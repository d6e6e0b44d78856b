//! Named-parameter checkpoint files.
//!
//! Layout (little-endian): magic `CMAEckpt`, version `u32`, then records of
//! `name_len u32, name bytes, rank u32, extents u32 × rank, f32 × numel`
//! until end of file.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMAEckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, entries: &[(String, Tensor<T>)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&u32_of(bytes.len())?.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&u32_of(t.rank())?.to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&u32_of(e)?.to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()
}

fn u32_of(v: usize) -> io::Result<u32> {
    u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{v} does not fit in u32")))
}

fn bad(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> io::Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(bad(format!("checkpoint truncated at byte {} reading {what}", self.pos)));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> io::Result<Vec<(String, Tensor<T>)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(bad("bad checkpoint magic at byte 0".into()));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version} at byte 8")));
    }
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let name_len = cur.u32("name length")? as usize;
        let at = cur.pos;
        let name = String::from_utf8(cur.take(name_len, "name")?.to_vec())
            .map_err(|_| bad(format!("parameter name at byte {at} is not UTF-8")))?;
        let rank = cur.u32("rank")? as usize;
        let shape = (0..rank).map(|_| cur.u32("extent").map(|e| e as usize)).collect::<io::Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| bad(format!("tensor {name} at byte {at} is too large")))?;
        let data = cur
            .take(bytes, "tensor data")?
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        out.push((name, Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, entries: &[(String, Tensor<T>)]) -> io::Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), entries)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> io::Result<Vec<(String, Tensor<T>)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
