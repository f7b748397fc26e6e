//! Named-array binary container used for checkpoints, preprocessed dataset
//! caches and occluded sets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "QHCNTNR\0"
//! version      u32      = 1
//! kind         u16 length + UTF-8
//! digest       u16 length + UTF-8 (hex)
//! array count  u32
//! per array:
//!   name       u16 length + UTF-8
//!   dtype      u8       0 = f32, 1 = f64, 2 = u8, 3 = u64
//!   rank       u8
//!   dims       rank × u64
//!   data       product(dims) elements, little-endian
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"QHCNTNR\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U8(_) => 2,
            ArrayData::U64(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub digest: String,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: &str, digest: &str) -> Self {
        Self { kind: kind.into(), digest: digest.into(), arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: ArrayData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("array {name}: shape {shape:?} vs {} values", data.len())));
        }
        self.arrays.push(NamedArray { name, shape: shape.to_vec(), data });
        Ok(())
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) -> Result<()> {
        let bytes = text.as_bytes().to_vec();
        self.push(name, &[bytes.len()], ArrayData::U8(bytes))
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("{} container has no array {name:?}", self.kind)))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match &self.get(name)?.data {
            ArrayData::U8(b) => String::from_utf8(b.clone()).map_err(|e| Error::Format(e.to_string())),
            _ => Err(Error::Format(format!("array {name:?} is not text"))),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32]> {
        match &self.get(name)?.data {
            ArrayData::F32(v) => Ok(v),
            _ => Err(Error::Format(format!("array {name:?} is not f32"))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::Format(format!("array {name:?} is not f64"))),
        }
    }

    pub fn u8s(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(Error::Format(format!("array {name:?} is not u8"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::Format(format!("array {name:?} is not u64"))),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.kind)?;
        write_str(w, &self.digest)?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for a in &self.arrays {
            write_str(w, &a.name)?;
            w.write_all(&[a.data.tag(), a.shape.len() as u8])?;
            for &d in &a.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                ArrayData::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                ArrayData::U8(v) => w.write_all(v)?,
                ArrayData::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a container file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let kind = read_str(r)?;
        let digest = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = read_str(r)?;
            let mut head = [0u8; 2];
            r.read_exact(&mut head).map_err(truncated)?;
            let shape = (0..head[1]).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match head[0] {
                0 => ArrayData::F32(read_le(r, n, f32::from_le_bytes)?),
                1 => ArrayData::F64(read_le(r, n, f64::from_le_bytes)?),
                2 => {
                    let mut v = vec![0u8; n];
                    r.read_exact(&mut v).map_err(truncated)?;
                    ArrayData::U8(v)
                }
                3 => ArrayData::U64(read_le(r, n, u64::from_le_bytes)?),
                t => return Err(Error::Format(format!("unknown dtype tag {t} for array {name:?}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        Ok(Self { kind, digest, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("container is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::InvalidArgument(format!("string too long: {} bytes", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(truncated)?;
    let mut s = vec![0u8; u16::from_le_bytes(b) as usize];
    r.read_exact(&mut s).map_err(truncated)?;
    String::from_utf8(s).map_err(|e| Error::Format(e.to_string()))
}

fn read_le<T, const N: usize>(r: &mut impl Read, n: usize, f: fn([u8; N]) -> T) -> Result<Vec<T>> {
    let mut bytes = vec![0u8; n * N];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes.chunks_exact(N).map(|c| f(c.try_into().expect("chunk of N bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test", "abc123");
        c.push("w", &[2, 2], ArrayData::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5])).unwrap();
        c.push("d", &[1], ArrayData::F64(vec![std::f64::consts::PI])).unwrap();
        c.push("n", &[3], ArrayData::U64(vec![0, 1, u64::MAX])).unwrap();
        c.push_text("meta", "héllo").unwrap();
        c
    }

    #[test]
    fn roundtrip() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.text("meta").unwrap(), "héllo");
        assert_eq!(&buf[..8], MAGIC);
    }

    #[test]
    fn rejects_garbage() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(Container::read_from(&mut buf.as_slice()), Err(Error::Format(_))));
        assert!(Container::read_from(&mut &b"NOTMAGIC...."[..]).is_err());
    }

    #[test]
    fn shape_must_match() {
        let mut c = Container::new("t", "");
        assert!(c.push("x", &[3], ArrayData::U8(vec![1, 2])).is_err());
    }
}
