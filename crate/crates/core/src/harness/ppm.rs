//! Binary PPM (P6) images with 8-bit channels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `(1, 3, H, W)` tensor with values in [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            f64::from(self.pixels[rest * 3 + c]) / 255.0
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = [0usize; 3];
        let magic = next_token(bytes, &mut pos)?;
        if magic != b"P6" {
            return Err(Error::Format(format!(
                "expected PPM magic P6, found {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        for (f, what) in fields.iter_mut().zip(["width", "height", "maxval"]) {
            let tok = next_token(bytes, &mut pos)?;
            *f = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("PPM {what} at byte {pos} is not a number")))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval} unsupported (only 255)")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != need {
            return Err(Error::Format(format!(
                "PPM raster has {} bytes, {width}x{height} needs {need}",
                raster.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: raster.to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

fn next_token<'a>(b: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < b.len() && b[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < b.len() && b[*pos] == b'#' {
            while *pos < b.len() && b[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < b.len() && !b[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("PPM header truncated".into()));
    }
    Ok(&b[start..*pos])
}
