//! Binary portable graymap (P5). Writes 16-bit big-endian samples with
//! maxval 65535; reads any maxval in `1..=65535`.

use std::fs;
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub const MAXVAL: f64 = 65535.0;

/// `[0, 1] → 0..=65535`, rounding to nearest.
pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * MAXVAL).round() as u16
}

pub fn header(width: usize, height: usize) -> String {
    format!("P5\n{width} {height}\n65535\n")
}

pub fn encode(image: &Image) -> Vec<u8> {
    let mut out = header(image.width, image.height).into_bytes();
    out.reserve(2 * image.data.len());
    for &v in &image.data {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    out
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode(image)).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|(offset, msg)| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, (usize, String)> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err((start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| (start, format!("{what} out of range")))
    }
}

/// Parses a P5 file, reporting `(byte offset, message)` on malformed input.
pub fn decode(bytes: &[u8]) -> std::result::Result<Image, (usize, String)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err((0, "missing P5 magic".into()));
    }
    let mut c = Cursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err((2, "expected whitespace after magic".into()));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err((maxval_at, format!("zero-sized image {width}×{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err((maxval_at, format!("maxval {maxval} outside 1..=65535")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err((c.pos, "expected a single whitespace before raster".into()));
    }
    let start = c.pos + 1;
    let per = if maxval < 256 { 1 } else { 2 };
    let need = width * height * per;
    if bytes.len() < start + need {
        return Err((bytes.len(), format!("raster truncated: need {need} bytes, have {}", bytes.len() - start)));
    }
    let raster = &bytes[start..start + need];
    let scale = maxval as f64;
    let data = if per == 1 {
        raster.iter().map(|&b| f64::from(b) / scale).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|p| f64::from(u16::from_be_bytes([p[0], p[1]])) / scale)
            .collect()
    };
    Ok(Image { height, width, data })
}
