//! Binary portable graymap (P5) reading and writing.

use std::path::Path;

use super::{io_err, DataError, GrayMap};
use crate::tensor::Tensor;

/// A decoded 8-bit graymap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, (usize, String)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or((start, format!("{what} out of range")))
    }
}

/// Parses P5 bytes. Errors carry the byte offset where parsing failed.
pub fn decode_pgm(bytes: &[u8]) -> Result<Pgm, (usize, String)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err((0, "missing P5 magic".into()));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err((maxval_at, format!("empty image {width}x{height}")));
    }
    if !(1..=255).contains(&maxval) {
        return Err((maxval_at, format!("unsupported maxval {maxval} (8-bit only)")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err((cur.pos, "expected a single whitespace byte before the raster".into())),
    }
    let need = width * height;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err((
            bytes.len(),
            format!("truncated raster: {} of {need} pixel bytes", raster.len()),
        ));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels: raster[..need].to_vec(),
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Reads a P5 file as a `[1,1,H,W]` tensor with ink = 1: pixel `p` maps to
/// `(maxval - p) / maxval`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let pgm = decode_pgm(&bytes).map_err(|(offset, detail)| DataError::Pgm {
        path: path.to_path_buf(),
        offset,
        detail,
    })?;
    let max = f64::from(pgm.maxval);
    let data = pgm
        .pixels
        .iter()
        .map(|&p| (max - f64::from(p.min(pgm.maxval as u8))) / max)
        .collect();
    Ok(Tensor::new(vec![1, 1, pgm.height, pgm.width], data).expect("raster size"))
}

/// Writes a `[0,1]` map as P5, value `v` becoming `round(255·(1−v))`.
pub fn export_gray_image(map: &GrayMap, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut pixels = Vec::with_capacity(map.values().len());
    for (index, &value) in map.values().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(DataError::OutOfRange { index, value });
        }
        pixels.push((255.0 * (1.0 - value)).round() as u8);
    }
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(map.width(), map.height(), &pixels)).map_err(io_err(path))
}
