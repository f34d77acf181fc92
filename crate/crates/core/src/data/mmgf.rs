//! `MMGF` binary tensor records.
//!
//! Layout of one record (all integers little-endian):
//!
//! ```text
//! "MMGF" | u8 version | u8 dtype | u8 rank | rank x u32 dims | row-major payload
//! ```
//!
//! dtype `1` is f32, dtype `2` is f64. Records may be concatenated in one
//! stream; checkpoints use that to keep all parameter tensors in one file.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMGF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn into_f32(self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v,
            TensorData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl RawTensor {
    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Self {
        RawTensor {
            dims,
            data: TensorData::F32(data),
        }
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        RawTensor {
            dims,
            data: TensorData::F64(data),
        }
    }
}

pub fn write_record<W: Write>(w: &mut W, tensor: &RawTensor) -> std::io::Result<()> {
    let expected: usize = tensor.dims.iter().product();
    assert_eq!(expected, tensor.data.len(), "dims do not match payload length");
    assert!(tensor.dims.len() <= u8::MAX as usize);
    let mut header = Vec::with_capacity(7 + 4 * tensor.dims.len());
    header.extend_from_slice(MAGIC);
    header.push(VERSION);
    header.push(tensor.data.dtype() as u8);
    header.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        let d = u32::try_from(d).expect("dimension exceeds u32");
        header.extend_from_slice(&d.to_le_bytes());
    }
    w.write_all(&header)?;
    match &tensor.data {
        TensorData::F32(v) => {
            let mut buf = Vec::with_capacity(v.len() * 4);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)
        }
        TensorData::F64(v) => {
            let mut buf = Vec::with_capacity(v.len() * 8);
            for x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)
        }
    }
}

/// Reads one record. Returns `Ok(None)` on a clean end of stream.
pub fn read_record<R: Read>(r: &mut R, context: &str) -> Result<Option<RawTensor>> {
    let mut magic = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r
            .read(&mut magic[filled..])
            .map_err(|e| Error::format(context, e.to_string()))?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::format(context, "truncated magic"));
        }
        filled += n;
    }
    if &magic != MAGIC {
        return Err(Error::format(context, format!("bad magic bytes {magic:?}")));
    }
    let mut head = [0u8; 3];
    read_exact(r, &mut head, context)?;
    if head[0] != VERSION {
        return Err(Error::format(context, format!("unsupported version {}", head[0])));
    }
    let dtype = DType::from_tag(head[1])
        .ok_or_else(|| Error::format(context, format!("unknown dtype tag {}", head[1])))?;
    let rank = head[2] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        read_exact(r, &mut b, context)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(context, "dimension product overflows"))?;
    let data = match dtype {
        DType::F32 => {
            let mut bytes = vec![0u8; count * 4];
            read_exact(r, &mut bytes, context)?;
            TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        DType::F64 => {
            let mut bytes = vec![0u8; count * 8];
            read_exact(r, &mut bytes, context)?;
            TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
    };
    Ok(Some(RawTensor { dims, data }))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], context: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format(context, format!("truncated record: {e}")))
}

pub fn write_file(path: &Path, tensor: &RawTensor) -> Result<()> {
    let mut buf = Vec::new();
    write_record(&mut buf, tensor).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<RawTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    let mut cursor = bytes.as_slice();
    let tensor = read_record(&mut cursor, &context)?
        .ok_or_else(|| Error::format(&context, "empty file"))?;
    if !cursor.is_empty() {
        return Err(Error::format(&context, "trailing bytes after record"));
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let t = RawTensor::f32(vec![2, 1], vec![1.0, -2.5]);
        let mut buf = Vec::new();
        write_record(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"MMGF");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 1);
        assert_eq!(buf[6], 2);
        assert_eq!(&buf[7..11], &2u32.to_le_bytes());
        assert_eq!(&buf[11..15], &1u32.to_le_bytes());
        assert_eq!(&buf[15..19], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 23);
    }

    #[test]
    fn concatenated_records() {
        let a = RawTensor::f32(vec![3], vec![1.0, 2.0, 3.0]);
        let b = RawTensor::f64(vec![1, 2], vec![0.5, f64::MIN_POSITIVE]);
        let mut buf = Vec::new();
        write_record(&mut buf, &a).unwrap();
        write_record(&mut buf, &b).unwrap();
        let mut cur = buf.as_slice();
        assert_eq!(read_record(&mut cur, "t").unwrap().unwrap(), a);
        assert_eq!(read_record(&mut cur, "t").unwrap().unwrap(), b);
        assert!(read_record(&mut cur, "t").unwrap().is_none());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let t = RawTensor::f32(vec![1], vec![1.0]);
        let mut buf = Vec::new();
        write_record(&mut buf, &t).unwrap();
        buf[0] = b'X';
        let err = read_record(&mut buf.as_slice(), "radar.rdt").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let t = RawTensor::f32(vec![4], vec![1.0; 4]);
        let mut buf = Vec::new();
        write_record(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_record(&mut buf.as_slice(), "t").is_err());
    }
}
