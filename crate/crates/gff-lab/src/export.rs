//! Binary PGM (P5) images for gate maps and change masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// `round(255 * v)` after clamping to `[0, 1]`; 0.5 maps to 128.
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

impl Gray {
    /// Quantizes values in `[0, 1]`, row-major `height x width`.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} image", values.len())));
        }
        Ok(Gray { width, height, pixels: values.iter().map(|&v| quantize(v)).collect() })
    }

    /// White where `mask` is set, black elsewhere.
    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != height * width {
            return Err(Error::Shape(format!("{} mask values for a {height}x{width} image", mask.len())));
        }
        Ok(Gray { width, height, pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect() })
    }

    pub fn unit_values(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses P5 with maxval 255; `#` comments in the header are skipped.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("pgm", "truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::format("pgm", format!("magic {:?}", fields[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format("pgm", format!("bad header field {s:?}")));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::format("pgm", format!("maxval {maxval}")));
        }
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != width * height {
            return Err(Error::format("pgm", format!("{} raster bytes for {width}x{height}", raster.len())));
        }
        Ok(Gray { width, height, pixels: raster.to_vec() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Gray::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// File name of the gate map of `level` (1-based) for one sample.
pub fn gate_file_name(level: usize, sample: &str) -> String {
    format!("gate_L{level}_{sample}.pgm")
}
