//! Binary weight file.
//!
//! Layout, all integers little-endian: magic `FPIE`, `u16` version, `u32`
//! tensor count, then per tensor a `u16` name length, the UTF-8 name, four
//! `u32` dims `(n, c, h, w)` and the raw `f32` payload.

use std::collections::HashMap;
use std::path::Path;

use crate::autodiff::Parameter;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"FPIE";
pub const VERSION: u16 = 1;

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let count = u32::try_from(tensors.len()).map_err(|_| Error::WeightFormat("too many tensors".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::WeightFormat(format!("tensor name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::WeightFormat(format!("{name}: dim exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(4 * t.numel());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::WeightFormat(format!(
                "bad length: truncated while reading {what} at byte {}",
                self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::WeightFormat("bad magic: not an FPIE weight file".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out: Vec<(String, Tensor)> = Vec::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::WeightFormat(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|_| Error::WeightFormat(format!("{name}: invalid dims {dims:?}")))?;
        let payload = r.take(
            shape
                .numel()
                .checked_mul(4)
                .ok_or_else(|| Error::WeightFormat(format!("{name}: payload size overflows")))?,
            &name,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(Error::WeightFormat(format!("duplicate tensor {name}")));
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::WeightFormat(format!(
            "bad length: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save(path: &Path, params: &[&Parameter]) -> Result<()> {
    let bytes = encode(params.iter().map(|p| (p.name(), p.value())))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HashMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?.into_iter().collect())
}

/// Copies tensors into same-named parameters; every parameter must be found
/// with a matching shape.
pub fn assign<'a>(params: impl IntoIterator<Item = &'a mut Parameter>, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for p in params {
        let t = tensors
            .get(p.name())
            .ok_or_else(|| Error::WeightFormat(format!("missing tensor {}", p.name())))?;
        if t.shape() != p.value().shape() {
            return Err(Error::WeightFormat(format!(
                "{}: file has {}, model expects {}",
                p.name(),
                t.shape(),
                p.value().shape()
            )));
        }
        p.set_value(t.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("a.weight".into(), Tensor::from_vec(Shape::new(2, 1, 1, 2).unwrap(), vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE]).unwrap()),
            ("b".into(), Tensor::scalar(7.0)),
        ]
    }

    #[test]
    fn byte_layout() {
        let t = sample();
        let bytes = encode(t.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(&bytes[..4], b"FPIE");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[2, 0, 0, 0]);
        assert_eq!(&bytes[10..12], &[8, 0]);
        assert_eq!(&bytes[12..20], b"a.weight");
        assert_eq!(&bytes[20..24], &[2, 0, 0, 0]);
        assert_eq!(&bytes[32..36], &[2, 0, 0, 0]);
        assert_eq!(&bytes[36..40], &1.0f32.to_le_bytes());
        let expected = 4 + 2 + 4 + (2 + 8 + 16 + 16) + (2 + 1 + 16 + 4);
        assert_eq!(bytes.len(), expected);
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn corrupt_files_rejected() {
        let t = sample();
        let bytes = encode(t.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        for cut in [0, 3, 9, 15, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).unwrap_err().to_string().contains("trailing"));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(decode(&ver).is_err());
    }
}
