//! Binary 8-bit PGM (`P5`) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    /// `[channels, H, W]` tensor with intensities mapped to `[0, 1]` and
    /// replicated across channels.
    pub fn to_tensor(&self, channels: usize) -> Tensor {
        let plane: Vec<f64> = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        let mut data = Vec::with_capacity(plane.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&plane);
        }
        Tensor::from_raw(vec![channels, self.height, self.width], data)
    }

    /// Min-max normalized 8-bit rendering of an `[H, W]` map. A constant map
    /// renders black.
    pub fn preview(map: &Tensor) -> Result<Self> {
        let &[h, w] = map.shape() else {
            return Err(Error::InvalidArgument(format!(
                "preview expects [H,W], got {:?}",
                map.shape()
            )));
        };
        let (lo, hi) = (map.min(), map.max());
        let span = hi - lo;
        let pixels = map
            .data()
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    0
                }
            })
            .collect();
        GrayImage::new(w, h, pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = HeaderParser { bytes, pos: 0 };
        if bytes.len() < 2 {
            return Err(p.err("truncated magic"));
        }
        if &bytes[..2] != b"P5" {
            return Err(Error::Parse {
                format: "PGM",
                offset: 0,
                message: "expected magic `P5`".into(),
            });
        }
        p.pos = 2;
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if width == 0 || height == 0 {
            return Err(p.err("zero image dimension"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(p.err("maxval must be in 1..=255 for 8-bit data"));
        }
        match bytes.get(p.pos) {
            Some(b) if b.is_ascii_whitespace() => p.pos += 1,
            _ => return Err(p.err("expected single whitespace after maxval")),
        }
        let n = width * height;
        let body = &bytes[p.pos..];
        if body.len() < n {
            return Err(Error::Parse {
                format: "PGM",
                offset: bytes.len(),
                message: format!("pixel data truncated: need {n} bytes, found {}", body.len()),
            });
        }
        if body.len() > n {
            return Err(Error::Parse {
                format: "PGM",
                offset: p.pos + n,
                message: "trailing bytes after pixel data".into(),
            });
        }
        let pixels = if maxval == 255 {
            body.to_vec()
        } else {
            body.iter()
                .map(|&v| ((v.min(maxval as u8) as usize * 255 + maxval / 2) / maxval) as u8)
                .collect()
        };
        GrayImage::new(width, height, pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderParser<'_> {
    fn err(&self, message: &str) -> Error {
        Error::Parse {
            format: "PGM",
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space_and_comments();
        if self.pos == before {
            return Err(self.err(&format!("expected whitespace before {what}")));
        }
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| self.err(&format!("{what} overflows")))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err(&format!("expected {what}")));
        }
        Ok(value)
    }
}
