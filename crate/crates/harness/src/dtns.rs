//! DTNS: a small binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DTNS" | version u16 | count u32 | record*
//! record = name_len u16 | name | rank u8 | extent u32 * rank | precision u8 | payload
//! ```
//!
//! Precision is the scalar width in bytes (4 or 8). Single-precision
//! payloads are written as `f32`, so a tensor survives a round trip bitwise
//! as long as its values are representable in its declared precision, which
//! [`Tensor::with_precision`] guarantees.

use std::io::{Read, Write};
use std::path::Path;

use drift_tensor::{Precision, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"DTNS";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self { name: name.into(), tensor }
    }
}

fn format_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Format(msg.into())
}

pub fn write_records(mut w: impl Write, records: &[Record]) -> Result<()> {
    let count = u32::try_from(records.len()).map_err(|_| format_err("too many records"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| format_err(format!("record name too long: {}", r.name)))?;
        let rank = u8::try_from(r.tensor.rank()).map_err(|_| format_err("tensor rank exceeds 255"))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[rank])?;
        for &e in r.tensor.shape() {
            let e = u32::try_from(e).map_err(|_| format_err("tensor extent exceeds u32"))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let precision = r.tensor.precision();
        w.write_all(&[precision.bytes() as u8])?;
        let mut payload = Vec::with_capacity(r.tensor.len() * precision.bytes());
        match precision {
            Precision::Single => r.tensor.data().iter().for_each(|&v| payload.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::Double => r.tensor.data().iter().for_each(|&v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        w.write_all(&payload)?;
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format_err("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_records(mut r: impl Read) -> Result<Vec<Record>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn decode(buf: &[u8]) -> Result<Vec<Record>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| format_err("record name is not UTF-8"))?.to_owned();
        let rank = c.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let width = c.u8()?;
        let precision = Precision::from_bytes(width).ok_or_else(|| format_err(format!("bad precision byte {width} in `{name}`")))?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| format_err("extent product overflows"))?;
        let bytes = c.take(n.checked_mul(precision.bytes()).ok_or_else(|| format_err("payload size overflows"))?)?;
        let data: Vec<f64> = match precision {
            Precision::Single => bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect(),
            Precision::Double => bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        };
        let tensor = Tensor::from_vec(&shape, data)?.with_precision(precision);
        records.push(Record { name, tensor });
    }
    if c.pos != buf.len() {
        return Err(format_err(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    decode(&std::fs::read(path)?)
}
