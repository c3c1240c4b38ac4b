//! Binary tensor blob.
//!
//! ```text
//! "HPTQ"                     4 bytes
//! version                    u32 LE
//! repeated until EOF:
//!   name length              u32 LE
//!   name                     UTF-8 bytes
//!   dtype                    u32 LE   (0 = f32 LE, 1 = i8)
//!   rank                     u32 LE
//!   dims                     rank × u32 LE
//!   payload                  row-major elements
//! ```

use std::path::Path;

use super::{IrError, FORMAT_VERSION};

pub const MAGIC: [u8; 4] = *b"HPTQ";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl Payload {
    pub fn dtype_code(&self) -> u32 {
        match self {
            Payload::F32(_) => 0,
            Payload::I8(_) => 1,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Payload::I8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f32(name: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims,
            payload: Payload::F32(data.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn i8(name: impl Into<String>, dims: Vec<usize>, data: Vec<i8>) -> Self {
        Self {
            name: name.into(),
            dims,
            payload: Payload::I8(data),
        }
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&r.payload.dtype_code().to_le_bytes());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IrError> {
        let end = self.pos.checked_add(n).ok_or(IrError::UnexpectedEof)?;
        let s = self.bytes.get(self.pos..end).ok_or(IrError::UnexpectedEof)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IrError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>, IrError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(IrError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(IrError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut records = Vec::new();
    while !cur.at_end() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| IrError::InvalidAttribute {
                node: "<blob>".into(),
                reason: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let dtype = cur.u32()?;
        let rank = cur.u32()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(IrError::UnexpectedEof)?;
        let payload = match dtype {
            0 => Payload::F32(
                cur.take(count.checked_mul(4).ok_or(IrError::UnexpectedEof)?)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            1 => Payload::I8(cur.take(count)?.iter().map(|&b| b as i8).collect()),
            other => return Err(IrError::UnknownDtype(other)),
        };
        records.push(Record {
            name,
            dims,
            payload,
        });
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[Record]) -> Result<(), IrError> {
    std::fs::write(path, encode(records))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<Record>, IrError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[Record::i8("w", vec![2], vec![-1, 3])]);
        assert_eq!(&bytes[..4], b"HPTQ");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes()); // name length
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes()); // dtype i8
        assert_eq!(&bytes[17..21], &1u32.to_le_bytes()); // rank
        assert_eq!(&bytes[21..25], &2u32.to_le_bytes());
        assert_eq!(&bytes[25..], &[0xff, 3]);
    }

    #[test]
    fn corrupt_containers() {
        let bytes = encode(&[Record::f32("x", vec![3], &[1.0, 2.0, 3.0])]);
        for cut in [2, 6, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(IrError::UnexpectedEof)), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(IrError::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(IrError::VersionMismatch { found: 9, .. })));
        let mut bad = bytes;
        bad[13] = 7;
        assert!(matches!(decode(&bad), Err(IrError::UnknownDtype(7))));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            floats in prop::collection::vec(any::<f32>(), 1..50),
            ints in prop::collection::vec(any::<i8>(), 1..50),
        ) {
            let recs = vec![
                Record { name: "a".into(), dims: vec![floats.len()], payload: Payload::F32(floats) },
                Record::i8("bé", vec![1, ints.len()], ints),
            ];
            let bytes = encode(&recs);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
