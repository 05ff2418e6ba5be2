//! Binary parameter files.
//!
//! Layout, all integers little-endian: magic `CNPP`, format version (u32),
//! tensor count (u32), then per tensor the name length (u32), UTF-8 name,
//! rank (u32), extents (u64 each) and the elements as f64.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CNPP";
const VERSION: u32 = 1;

pub type Named = Vec<(String, Tensor)>;

pub fn to_bytes(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Named> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = u32_at(take(4)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let rank = u32_at(take(4)?) as usize;
        let shape = (0..rank)
            .map(|_| Ok(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| bad("extent overflow"))?;
        let raw = take(n.checked_mul(8).ok_or_else(|| bad("extent overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn write(w: &mut impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(&to_bytes(tensors))?;
    Ok(())
}

pub fn read(r: &mut impl Read) -> Result<Named> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Looks up `name`, checking its shape.
pub fn take_tensor(named: &[(String, Tensor)], name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = named
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| bad(format!("missing tensor {name}")))?;
    if t.shape() != shape {
        return Err(Error::shape("checkpoint", t.shape(), shape));
    }
    Ok(t)
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let named = vec![
            ("a".to_string(), Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap()),
            ("scalar".to_string(), Tensor::scalar(0.1)),
            ("empty".to_string(), Tensor::zeros(&[0, 4])),
        ];
        let bytes = to_bytes(&named);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), 3);
        for ((n0, t0), (n1, t1)) in named.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert!(t0.bit_eq(t1));
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_damage() {
        let bytes = to_bytes(&[("w".to_string(), Tensor::zeros(&[3]))]);
        assert!(from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(from_bytes(b"NOPE").is_err());
        let mut longer = bytes.clone();
        longer.push(1);
        assert!(from_bytes(&longer).is_err());
    }
}
