//! Binary PPM (P6) frames and PGM (P5) masks, 8-bit only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// `[H, W, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::from_parts(vec![self.height, self.width, 3], data)
    }
}

impl GrayImage {
    /// Interprets a bilevel mask as a `[H, W]` tensor of zeros and ones.
    pub fn to_mask(&self) -> Result<Tensor> {
        if let Some(bad) = self.pixels.iter().find(|&&p| p != 0 && p != 255) {
            return Err(Error::data(format!("mask pixel value {bad} is not 0 or 255")));
        }
        let data = self
            .pixels
            .iter()
            .map(|&p| if p == 255 { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::from_parts(vec![self.height, self.width], data))
    }

    /// Bilevel mask from a `[H, W]` tensor; values above one half become 255.
    pub fn from_mask(mask: &Tensor) -> Result<Self> {
        let [height, width] = *mask.shape() else {
            return Err(Error::dim("mask", format!("expected [H, W], got {:?}", mask.shape())));
        };
        let pixels = mask
            .data()
            .iter()
            .map(|&v| if v > 0.5 { 255 } else { 0 })
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 255).count()
    }
}

fn encode(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode("P6", img.width, img.height, &img.pixels)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode("P5", img.width, img.height, &img.pixels)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, path)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn parse_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let (width, height, pixels) = parse(bytes, path, b"P6", 3)?;
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let (width, height, pixels) = parse(bytes, path, b"P5", 1)?;
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| self.fail(start, format!("{what} out of range")))
    }
}

fn parse(bytes: &[u8], path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if bytes.get(..2) != Some(magic.as_slice()) {
        return Err(cur.fail(
            0,
            format!("expected magic {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    cur.pos = 2;
    if !bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(cur.fail(2, "expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_separators();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(cur.fail(maxval_at, "image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(cur.fail(maxval_at, format!("maxval {maxval} unsupported, need 255")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.fail(cur.pos, "expected a single whitespace byte before the payload"));
    }
    cur.pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.fail(cur.pos, "image dimensions overflow"))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(cur.fail(
            bytes.len(),
            format!("payload truncated: need {need} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(cur.fail(cur.pos + need, "trailing bytes after payload"));
    }
    Ok((width, height, payload.to_vec()))
}
