//! `CVT1` binary tensor files.
//!
//! Layout: magic `CVT1`, one dtype byte (0 = f32), one rank byte, `rank`
//! little-endian u32 dims, then the values row-major as little-endian f32.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVT1";
const DTYPE_F32: u8 = 0;

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// `origin` only labels errors.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let fail = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    if bytes.len() < 6 {
        return Err(fail(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(fail(format!("unsupported dtype {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(fail("rank 0".into()));
    }
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(fail("truncated dimension block".into()));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(fail(format!("zero dimension in {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail(format!("shape {shape:?} overflows")))?;
    let body = &bytes[dims_end..];
    if body.len() != 4 * n {
        return Err(fail(format!(
            "expected {} value bytes for shape {shape:?}, found {}",
            4 * n,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, values).map_err(|e| fail(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0f32, -2.5]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..6], b"CVT1\x00\x02");
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        let p = Path::new("x.cvt");
        let good = encode_tensor(&Tensor::ones(&[3]));
        for bad in [
            &good[..3],
            &good[..good.len() - 1],
            b"CVT2\x00\x01\x01\x00\x00\x00\x00\x00\x00\x00".as_slice(),
            b"CVT1\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00".as_slice(),
        ] {
            assert!(matches!(decode_tensor(bad, p), Err(Error::Format { .. })));
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..4, 1..4),
            bits in proptest::collection::vec(any::<u32>(), 64),
        ) {
            let n: usize = dims.iter().product();
            // arbitrary bit patterns, NaN payloads and signed zeros included
            let values: Vec<f32> = bits[..n].iter().map(|&b| f32::from_bits(b)).collect();
            let t = Tensor::new(&dims, values).unwrap();
            let back = decode_tensor(&encode_tensor(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.to_bytes_f32(), t.to_bytes_f32());
        }
    }
}
