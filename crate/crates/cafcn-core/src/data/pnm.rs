//! Binary portable graymap (P5) and pixmap (P6) reading and writing.
//!
//! Maps and masks round-trip losslessly at 8-bit quantization. Parse errors
//! report the byte offset where the file stopped making sense.

use crate::error::{Error, Result};
use crate::metrics::{GroundTruthMask, SaliencyMap};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn fail<T>(&self, message: &str) -> Result<T> {
        Err(Error::Format { offset: self.pos, message: message.into() })
    }

    fn peek(&self) -> Option<u8> {
        self.data.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(b) = self.peek() {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(c) = self.bump() {
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        let mut value = 0usize;
        while let Some(b) = self.peek() {
            if b.is_ascii_digit() {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((b - b'0') as usize))
                    .ok_or(Error::Format {
                        offset: self.pos,
                        message: format!("{what} overflows"),
                    })?;
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return self.fail(&format!("expected {what}"));
        }
        Ok(value)
    }
}

fn parse(data: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor::new(data);
    if data.len() < 2 || &data[0..2] != magic {
        return cur.fail(&format!(
            "wrong magic, expected {}",
            std::str::from_utf8(magic).unwrap()
        ));
    }
    cur.pos = 2;
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: cur.pos,
            message: format!("unsupported maxval {maxval}, expected 255"),
        });
    }
    match cur.bump() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return cur.fail("expected single whitespace after maxval"),
    }
    let channels = if magic == b"P5" { 1 } else { 3 };
    let expected = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or(Error::Format { offset: cur.pos, message: "size overflows".into() })?;
    if width == 0 || height == 0 {
        return cur.fail("zero image dimension");
    }
    let payload = &data[cur.pos..];
    if payload.len() < expected {
        return Err(Error::Format {
            offset: data.len(),
            message: format!(
                "truncated payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        });
    }
    Ok((width, height, payload[..expected].to_vec()))
}

fn write_header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

pub fn save_gray(path: &Path, width: usize, height: usize, levels: &[u8]) -> Result<()> {
    if levels.len() != width * height {
        return Err(Error::Dimension(format!(
            "gray payload length {} != {width}x{height}",
            levels.len()
        )));
    }
    let mut bytes = write_header("P5", width, height);
    bytes.extend_from_slice(levels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    parse(&data, b"P5")
}

pub fn save_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Dimension(format!(
            "rgb payload length {} != {width}x{height}x3",
            rgb.len()
        )));
    }
    let mut bytes = write_header("P6", width, height);
    bytes.extend_from_slice(rgb);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    parse(&data, b"P6")
}

/// Writes a saliency map as an 8-bit graymap using the `round(v*255)` rule.
pub fn save_map(map: &SaliencyMap, path: &Path) -> Result<()> {
    save_gray(path, map.width(), map.height(), &map.levels())
}

pub fn load_map(path: &Path) -> Result<SaliencyMap> {
    let (width, height, levels) = load_gray(path)?;
    SaliencyMap::from_levels(height, width, &levels)
}

/// Writes a binary mask with foreground as 255.
pub fn save_mask(mask: &GroundTruthMask, path: &Path) -> Result<()> {
    let levels: Vec<u8> = mask.values().iter().map(|&v| v * 255).collect();
    save_gray(path, mask.width(), mask.height(), &levels)
}

/// Loads a mask, binarizing at level 128.
pub fn load_mask(path: &Path) -> Result<GroundTruthMask> {
    let (width, height, levels) = load_gray(path)?;
    GroundTruthMask::new(height, width, levels.iter().map(|&l| u8::from(l >= 128)).collect())
}

/// Writes an `H x W x 3` tensor with values in [0, 1] as a pixmap.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if image.rank() != 3 || s[2] != 3 {
        return Err(Error::Dimension(format!(
            "image tensor must be H x W x 3, got {s:?}"
        )));
    }
    let bytes: Vec<u8> = image
        .values()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    save_rgb(path, s[1], s[0], &bytes)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let (width, height, bytes) = load_rgb(path)?;
    let values = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&[height, width, 3], values)
}
