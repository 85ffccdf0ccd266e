//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn token(&mut self, what: &str) -> Result<(usize, String)> {
        let b = self.bytes;
        loop {
            while self.pos < b.len() && b[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < b.len() && b[self.pos] == b'#' {
                while self.pos < b.len() && b[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < b.len() && !b[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start as u64, format!("missing {what}")));
        }
        Ok((start, String::from_utf8_lossy(&b[start..self.pos]).into_owned()))
    }

    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let (at, s) = self.token(what)?;
        let v = s.parse::<usize>().map_err(|_| Error::format(at as u64, format!("bad {what} {s:?}")))?;
        Ok((at, v))
    }
}

/// Decodes a P5/P6 image into a `(1, C, H, W)` tensor with values in `[0, 1]`.
pub fn decode_image<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut hdr = Header { bytes, pos: 0 };
    let (_, magic) = hdr.token("magic")?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(Error::format(0, format!("unsupported image magic {magic:?} (P5 or P6 expected)"))),
    };
    let (_, w) = hdr.number("width")?;
    let (_, h) = hdr.number("height")?;
    let (maxval_at, maxval) = hdr.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at as u64, format!("maxval {maxval} unsupported (255 expected)")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = hdr.pos + 1;
    let need = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| Error::Size(format!("image {w}×{h} is too large")))?;
    if bytes.len() < start + need {
        return Err(Error::format(bytes.len() as u64, format!("truncated raster: {need} bytes expected")));
    }
    let raster = &bytes[start..start + need];
    let plane = h * w;
    let mut data = vec![T::ZERO; need];
    for (i, &b) in raster.iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        data[ch * plane + pix] = T::from_f64(b as f64 / 255.0);
    }
    Tensor::from_vec([1, channels, h, w], data)
}

/// Encodes a `(1, C, H, W)` tensor, `C ∈ {1, 3}`, clamping to `[0, 1]` and
/// rounding to the nearest of 256 levels.
pub fn encode_image<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, c, h, w] = t.dims();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::Shape(format!("image tensors must be (1, 1|3, H, W), got {:?}", t.dims())));
    }
    let mut out = format!("{}\n{w} {h}\n255\n", if c == 1 { "P5" } else { "P6" }).into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for pix in 0..plane {
        for ch in 0..c {
            let v = t.data()[ch * plane + pix].to_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

pub fn write_image<T: Element>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = encode_image(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
