//! Binary tensor container: `SSTN`, u16 version, u8 dtype code, u8 rank,
//! rank × u64 extents, then the row-major payload. Everything little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{AnyTensor, DType, Element, Tensor};
use crate::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"SSTN";
pub const TENSOR_VERSION: u16 = 1;

fn encode<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size_in_bytes());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialized bytes of one tensor record.
pub fn encode_tensor(t: &AnyTensor) -> Result<Vec<u8>> {
    if t.shape().len() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit the header", t.shape().len())));
    }
    let mut out = Vec::new();
    match t {
        AnyTensor::F32(t) => encode(t, &mut out),
        AnyTensor::F64(t) => encode(t, &mut out),
        AnyTensor::U8(t) => encode(t, &mut out),
    }
    Ok(out)
}

pub fn write_tensor(w: &mut impl Write, t: &AnyTensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    w.write_all(&bytes).map_err(|e| Error::Format(format!("write failed: {e}")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated tensor record: missing {what}")),
        _ => Error::Format(format!("read failed: {e}")),
    })
}

fn decode<T: Element>(r: &mut impl Read, shape: &[usize], numel: usize) -> Result<Tensor<T>> {
    let size = T::DTYPE.size_in_bytes();
    let mut payload = vec![0u8; numel * size];
    read_exact(r, &mut payload, "payload")?;
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Reads one tensor record from a stream.
pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02X?}, expected {TENSOR_MAGIC:02X?} (\"SSTN\")")));
    }
    let mut header = [0u8; 4];
    read_exact(r, &mut header, "header")?;
    let version = u16::from_le_bytes([header[0], header[1]]);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported tensor format version {version}")));
    }
    let dtype =
        DType::from_code(header[2]).ok_or_else(|| Error::Format(format!("unsupported dtype code {}", header[2])))?;
    let ndim = header[3] as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact(r, &mut b, "extents")?;
        let d = u64::from_le_bytes(b);
        let d = usize::try_from(d)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::Format(format!("extent {d} is not a positive size")))?;
        numel = numel
            .checked_mul(d)
            .filter(|&n| n.checked_mul(dtype.size_in_bytes()).is_some())
            .ok_or_else(|| Error::Format("extents overflow the address space".into()))?;
        shape.push(d);
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode(r, &shape, numel)?),
        DType::F64 => AnyTensor::F64(decode(r, &shape, numel)?),
        DType::U8 => AnyTensor::U8(decode(r, &shape, numel)?),
    })
}

/// Parses a complete file image; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!(
            "{} bytes beyond the payload implied by shape {:?}",
            cursor.len(),
            t.shape()
        )));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: impl Into<AnyTensor>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(&t.into())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_f64_payload_bytes() {
        let bytes = encode_tensor(&Tensor::new(&[1], vec![1.0f64]).unwrap().into()).unwrap();
        assert_eq!(&bytes[..4], b"SSTN");
        assert_eq!(&bytes[4..8], &[1, 0, 2, 1]);
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..], &[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F]);
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut bytes = encode_tensor(&Tensor::new(&[2], vec![1u8, 0]).unwrap().into()).unwrap();
        bytes[0] = b'X';
        let err = decode_tensor(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }

    #[test]
    fn header_faults() {
        let good = encode_tensor(&Tensor::new(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap().into()).unwrap();
        let mut v = good.clone();
        v[4] = 2;
        assert!(decode_tensor(&v).unwrap_err().to_string().contains("version"));
        let mut v = good.clone();
        v[6] = 9;
        assert!(decode_tensor(&v).unwrap_err().to_string().contains("dtype"));
        assert!(decode_tensor(&good[..good.len() - 1]).unwrap_err().to_string().contains("truncated"));
        let mut v = good.clone();
        v.push(0);
        assert!(decode_tensor(&v).unwrap_err().to_string().contains("beyond"));
        let mut v = good;
        v[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(decode_tensor(&v).is_err());
    }

    #[test]
    fn scalar_round_trip() {
        let t = AnyTensor::from(Tensor::scalar(-0.0f32));
        let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
        assert_eq!(back.shape(), &[] as &[usize]);
        assert_eq!(back.to_float::<f32>().unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
    }
}
