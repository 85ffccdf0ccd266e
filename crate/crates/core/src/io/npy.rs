//! NPY v1.0 reader and writer for little-endian `f4` / `f8` arrays.

use std::fs;
use std::path::Path;

use crate::element::{DType, Element};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
/// Preamble: magic, two version bytes, u16 header length.
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

/// Contents of an NPY file before conversion to a [`Tensor`].
#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Raw little-endian payload.
    pub bytes: Vec<u8>,
}

impl NpyArray {
    /// Rank ≤ 4 arrays become rank-4 tensors with leading extents of 1.
    /// Values are converted when the file dtype differs from `T`.
    pub fn into_tensor<T: Element>(self) -> Result<Tensor<T>> {
        if self.shape.len() > 4 {
            return Err(Error::Shape(format!("npy array of rank {} exceeds 4", self.shape.len())));
        }
        let mut dims: Dims = [1; 4];
        dims[4 - self.shape.len()..].copy_from_slice(&self.shape);
        let width = self.dtype.size_of();
        let data: Vec<T> = if T::DTYPE == self.dtype {
            self.bytes.chunks_exact(width).map(T::from_le_slice).collect()
        } else {
            match self.dtype {
                DType::F32 => self.bytes.chunks_exact(4).map(|c| T::from_f64(f32::from_le_slice(c) as f64)).collect(),
                DType::F64 => self.bytes.chunks_exact(8).map(|c| T::from_f64(f64::from_le_slice(c))).collect(),
            }
        };
        Tensor::from_vec(dims, data)
    }
}

fn header_text(dtype: DType, shape: &[usize]) -> String {
    let dims = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut h = format!("{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}", dtype.npy_descr());
    let total = PREAMBLE + h.len() + 1;
    h.push_str(&" ".repeat((ALIGN - total % ALIGN) % ALIGN));
    h.push('\n');
    h
}

/// Encodes `t` with an explicit logical `shape` (any rank whose product is
/// the element count).
pub fn encode_npy<T: Element>(t: &Tensor<T>, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.iter().product::<usize>() != t.len() {
        return Err(Error::Shape(format!("npy shape {shape:?} does not hold {} values", t.len())));
    }
    let header = header_text(T::DTYPE, shape);
    let hlen = u16::try_from(header.len()).map_err(|_| Error::Shape("npy header exceeds 65535 bytes".into()))?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + t.len() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in t.data() {
        v.to_le_bytes_vec(&mut out);
    }
    Ok(out)
}

/// Writes `t` as a rank-4 array.
pub fn write_npy<T: Element>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_npy(t, &t.dims())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_npy<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes)?.into_tensor()
}

/// Parses an in-memory NPY v1.0 file.
pub fn decode_npy(bytes: &[u8]) -> Result<NpyArray> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(bytes.len() as u64, "truncated npy preamble"));
    }
    if &bytes[..6] != MAGIC {
        return Err(Error::format(0, "bad npy magic"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::format(6, format!("unsupported npy version {}.{}", bytes[6], bytes[7])));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE + hlen;
    if bytes.len() < data_start {
        return Err(Error::format(bytes.len() as u64, "truncated npy header"));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE..data_start]).map_err(|e| Error::format((PREAMBLE + e.valid_up_to()) as u64, "npy header is not text"))?;
    let field = |key: &str| -> Result<(usize, &str)> {
        let pat = format!("'{key}':");
        let at = header.find(&pat).ok_or_else(|| Error::format(PREAMBLE as u64, format!("npy header lacks {key:?}")))?;
        let start = at + pat.len();
        Ok((PREAMBLE + start, header[start..].trim_start()))
    };

    let (off, rest) = field("descr")?;
    let descr = rest
        .strip_prefix('\'')
        .and_then(|r| r.split('\'').next())
        .ok_or_else(|| Error::format(off as u64, "malformed descr"))?;
    let dtype = match descr {
        "<f4" => DType::F32,
        "<f8" => DType::F64,
        other => return Err(Error::UnsupportedDtype(other.to_string())),
    };

    let (off, rest) = field("fortran_order")?;
    if rest.starts_with("True") {
        return Err(Error::format(off as u64, "fortran-ordered arrays are not supported"));
    } else if !rest.starts_with("False") {
        return Err(Error::format(off as u64, "malformed fortran_order"));
    }

    let (off, rest) = field("shape")?;
    let inner = rest
        .strip_prefix('(')
        .and_then(|r| r.split(')').next())
        .ok_or_else(|| Error::format(off as u64, "malformed shape"))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| Error::format(off as u64, format!("bad shape extent {s:?}"))))
        .collect::<Result<Vec<_>>>()?;

    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size_of()))
        .ok_or_else(|| Error::Size(format!("npy shape {shape:?} overflows")))?;
    let payload = &bytes[data_start..];
    if payload.len() < count {
        return Err(Error::format(bytes.len() as u64, format!("truncated npy payload: {} of {count} bytes", payload.len())));
    }
    if payload.len() > count {
        return Err(Error::format((data_start + count) as u64, "trailing bytes after npy payload"));
    }
    Ok(NpyArray {
        dtype,
        shape,
        bytes: payload.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn golden_header_for_a_single_f4() {
        // Hand-assembled: magic, version 1.0, header length 118 (0x76, LE),
        // dict, space padding to a 64-byte boundary, newline.
        let mut want: Vec<u8> = vec![0x93, b'N', b'U', b'M', b'P', b'Y', 0x01, 0x00, 0x76, 0x00];
        let dict = b"{'descr': '<f4', 'fortran_order': False, 'shape': (1,), }";
        want.extend_from_slice(dict);
        want.extend(std::iter::repeat(b' ').take(128 - 10 - dict.len() - 1));
        want.push(b'\n');
        want.extend_from_slice(&1.5f32.to_le_bytes());
        let t = Tensor::<f32>::from_vec([1, 1, 1, 1], vec![1.5]).unwrap();
        let got = encode_npy(&t, &[1]).unwrap();
        assert_eq!(&got[..16], &want[..16]);
        assert_eq!(got, want);
        let back = decode_npy(&got).unwrap();
        assert_eq!(back.shape, vec![1]);
        assert_eq!(back.into_tensor::<f32>().unwrap().data(), &[1.5]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        let t = Tensor::<f64>::normal([2, 3, 4, 5], 0.0, 1.0, &mut rng).unwrap();
        let back = decode_npy(&encode_npy(&t, &t.dims()).unwrap()).unwrap().into_tensor::<f64>().unwrap();
        assert!(back.bitwise_eq(&t));
        let t32: Tensor<f32> = t.cast();
        let back = decode_npy(&encode_npy(&t32, &t32.dims()).unwrap()).unwrap().into_tensor::<f32>().unwrap();
        assert!(back.bitwise_eq(&t32));
    }

    #[test]
    fn rejects_bad_files() {
        let t = Tensor::<f32>::ones([1, 1, 2, 2]).unwrap();
        let good = encode_npy(&t, &[2, 2]).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_npy(&bad), Err(Error::Format { offset: 0, .. })));

        let mut big = good.clone();
        let pos = big.windows(3).position(|w| w == b"<f4").unwrap();
        big[pos] = b'>';
        assert!(matches!(decode_npy(&big), Err(Error::UnsupportedDtype(d)) if d == ">f4"));

        let truncated = &good[..good.len() - 3];
        match decode_npy(truncated) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, truncated.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(decode_npy(&good[..5]).is_err());
    }

    #[test]
    fn dtype_conversion_on_read() {
        let t = Tensor::<f32>::from_vec([1, 1, 1, 2], vec![0.25, -3.0]).unwrap();
        let wide = decode_npy(&encode_npy(&t, &[2]).unwrap()).unwrap().into_tensor::<f64>().unwrap();
        assert_eq!(wide.data(), &[0.25, -3.0]);
    }
}
