//! `.tns` binary tensor files.
//!
//! Layout: `b"TNSR"`, version `u8 = 1`, dtype `u8` (1 = f32, 2 = f64),
//! ndim `u8`, reserved `u8 = 0`, `ndim` little-endian `u32` extents, then the
//! row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

fn fmt_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.ndim() > u8::MAX as usize {
        return Err(fmt_err(format!("rank {} exceeds 255", t.ndim())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), t.ndim() as u8, 0]);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| fmt_err(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Header fields of an encoded tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fmt_err("missing TNSR magic"));
    }
    if bytes[4] != VERSION {
        return Err(fmt_err(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| fmt_err(format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(fmt_err("reserved byte must be zero"));
    }
    let dims_end = 8 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(fmt_err("truncated header"));
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Ok((Header { dtype, shape }, dims_end))
}

/// Decode into element type `T`, converting from the stored dtype if needed.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (header, start) = decode_header(bytes)?;
    let n = numel(&header.shape);
    let width = header.dtype.size();
    let payload = &bytes[start..];
    if payload.len() != n * width {
        return Err(fmt_err(format!(
            "payload is {} bytes, shape {:?} needs {}",
            payload.len(),
            header.shape,
            n * width
        )));
    }
    let data: Vec<T> = match header.dtype {
        d if d == T::DTYPE => payload.chunks_exact(width).map(T::read_le).collect(),
        DType::F32 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::from_vec(header.shape, data)
}

/// Write atomically: encode to a sibling temp file, then rename.
pub fn save<T: Real>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    let tmp = path.with_extension("tns.partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec([2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..8], &[b'T', b'N', b'S', b'R', 1, 1, 2, 0]);
        assert_eq!(&b[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::zeros([4]);
        let mut b = encode(&t).unwrap();
        assert!(decode::<f64>(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode::<f64>(&b).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tns");
        let t = Tensor::<f64>::from_fn([3, 2, 2], |i| (i as f64).sin());
        save(&t, &p).unwrap();
        assert_eq!(load::<f64>(&p).unwrap(), t);
        assert!(!dir.path().join("x.tns.partial").exists());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let t = Tensor::<f32>::from_fn(shape, |i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x3fff_ffff));
            let back: Tensor<f32> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
