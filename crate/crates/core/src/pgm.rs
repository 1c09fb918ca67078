//! Binary greyscale PGM (`P5`, maxval 255).
//!
//! Written files use the exact layout `"P5\n<width> <height>\n255\n"`
//! followed by `width * height` raw bytes. The reader also accepts
//! arbitrary header whitespace and `#` comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `round(v · 255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl GrayImage {
    /// From a `[1,H,W]`, `[1,1,H,W]` or `[H,W]` tensor with values in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (height, width) = match t.dims() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            d => return Err(Error::shape(format!("cannot store {d:?} as a greyscale image"))),
        };
        Ok(Self {
            width,
            height,
            pixels: t.data().iter().map(|&v| quantize(v)).collect(),
        })
    }

    /// Values `byte / 255` as a `[1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_values(
            &[1, self.height, self.width],
            self.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("pixel count matches extents")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        match bytes.get(..2) {
            Some(b"P5") => {}
            Some([b'P', d]) if d.is_ascii_digit() => {
                return Err(Error::UnsupportedFormat(format!(
                    "P{} (only binary P5 greyscale is supported)",
                    *d as char
                )))
            }
            _ => {
                return Err(Error::Pgm {
                    offset: 0,
                    reason: "missing P5 magic".into(),
                })
            }
        }
        r.pos = 2;
        let (width, _) = r.number("width")?;
        let (height, _) = r.number("height")?;
        let (maxval, maxval_at) = r.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Pgm {
                offset: maxval_at,
                reason: format!("maxval {maxval} unsupported, expected 255"),
            });
        }
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => {
                return Err(Error::Pgm {
                    offset: r.pos,
                    reason: "expected a single whitespace byte before the pixel data".into(),
                })
            }
        }
        if width == 0 || height == 0 {
            return Err(Error::Pgm {
                offset: r.pos,
                reason: format!("empty image {width}x{height}"),
            });
        }
        let need = width * height;
        let payload = &bytes[r.pos..];
        if payload.len() < need {
            return Err(Error::Pgm {
                offset: bytes.len(),
                reason: format!(
                    "truncated payload: expected {need} bytes from offset {}, found {}",
                    r.pos,
                    payload.len()
                ),
            });
        }
        Ok(Self {
            width,
            height,
            pixels: payload[..need].to_vec(),
        })
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Parses a decimal field, returning it with its start offset.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        let before = self.pos;
        self.skip_blank();
        if self.pos == before {
            return Err(Error::Pgm {
                offset: self.pos,
                reason: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Pgm {
                offset: start,
                reason: format!("expected decimal {what}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map(|v| (v, start))
            .map_err(|_| Error::Pgm {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, img.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    GrayImage::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_header_layout() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 1, 2, 253, 254, 255],
        };
        let bytes = img.encode();
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(GrayImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_and_whitespace_accepted() {
        let mut bytes = b"P5 # made by hand\n  2\t1 # dims\n255\n".to_vec();
        bytes.extend([7, 9]);
        let img = GrayImage::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.pixels.clone()), (2, 1, vec![7, 9]));
    }

    #[test]
    fn ascii_variant_unsupported() {
        let err = GrayImage::decode(b"P2\n1 1\n255\n0\n").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)), "{err}");
    }

    #[test]
    fn malformed_inputs_name_offsets() {
        let err = GrayImage::decode(b"GIF89a").unwrap_err();
        assert!(matches!(err, Error::Pgm { offset: 0, .. }), "{err}");

        let err = GrayImage::decode(b"P5\n4 x\n255\n").unwrap_err();
        assert!(matches!(err, Error::Pgm { offset: 5, .. }), "{err}");

        let err = GrayImage::decode(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert!(matches!(err, Error::Pgm { offset: 7, .. }), "{err}");

        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend([1u8; 10]);
        let err = GrayImage::decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Pgm { offset: 21, .. }), "{err}");
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn mask_encoding() {
        let m = Tensor::from_values(&[1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(GrayImage::from_tensor(&m).unwrap().pixels, vec![255, 0]);
    }
}
