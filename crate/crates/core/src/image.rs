//! 8-bit grayscale grids and binary PGM (`P5`) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::Shape(format!(
                "{width}x{height} image given {} pixels",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = next_token()?;
        if magic != "P5" {
            return Err(Error::Format(format!("unsupported PGM magic {magic:?}")));
        }
        let parse = |s: String| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
        };
        let width = parse(next_token()?)?;
        let height = parse(next_token()?)?;
        let maxval = parse(next_token()?)?;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "only 8-bit PGM is supported, maxval {maxval}"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let data = bytes
            .get(start..start + width * height)
            .ok_or_else(|| Error::Format("truncated PGM raster".into()))?
            .to_vec();
        Self::new(width, height, data)
    }

    pub fn load_pgm(path: &Path) -> Result<Self> {
        Self::decode_pgm(&fs::read(path)?)
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_pgm())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::from_fn(5, 3, |r, c| (r * 40 + c * 7) as u8);
        let back = GrayImage::decode_pgm(&img.encode_pgm()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 200]);
        let img = GrayImage::decode_pgm(&bytes).unwrap();
        assert_eq!(img.data(), &[9, 200]);
    }

    #[test]
    fn rejects_bad_pgm() {
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n4 4\n255\n\x00").is_err());
    }
}
