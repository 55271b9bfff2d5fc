//! In-memory images and binary masks, plus Netpbm I/O.
//!
//! Images are HWC row-major `f64` in [0,1] with 1 (grayscale) or 3 (RGB)
//! channels. On disk, images are binary Netpbm: P6 for RGB, P5 for grayscale,
//! always written with maxval 255 and the exact header `P6\n{w} {h}\n255\n`,
//! so identical pixel data produces byte-identical files. Masks are P5 files
//! holding only 0 and 255.
//!
//! The reader is more tolerant than the writer: it accepts comments, any
//! header whitespace, and any maxval up to 255 (values are scaled).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    /// HWC row-major, values in [0,1].
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid_param(
                "image size",
                format!("{height}x{width} must be at least 1x1"),
            ));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid_param(
                "channels",
                format!("{channels} (supported: 1, 3)"),
            ));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "Image::new",
                format!("{} values", height * width * channels),
                format!("{}", data.len()),
            ));
        }
        for (i, v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Invalid(format!(
                    "Image::new: value {v} at flat index {i} outside [0,1]"
                )));
            }
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Flattens to CHW order (the tensor layout used by the model).
    pub fn to_chw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let plane = self.height * self.width;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[c * plane + y * self.width + x] = self.get(y, x, c);
                }
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; validates range like `new`.
    pub fn from_chw(height: usize, width: usize, channels: usize, chw: &[f64]) -> Result<Self> {
        if chw.len() != height * width * channels {
            return Err(Error::shape(
                "Image::from_chw",
                format!("{} values", height * width * channels),
                format!("{}", chw.len()),
            ));
        }
        let plane = height * width;
        let mut data = vec![0.0; chw.len()];
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data[(y * width + x) * channels + c] = chw[c * plane + y * width + x];
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    /// Reads a binary Netpbm file: P6 becomes a 3-channel image, P5 a
    /// 1-channel one.
    pub fn read_netpbm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let raster = parse_netpbm(path, &bytes)?;
        let channels = match raster.magic {
            Magic::P5 => 1,
            Magic::P6 => 3,
        };
        let data = raster
            .samples
            .iter()
            .map(|&b| b as f64 / raster.maxval as f64)
            .collect();
        Image::new(raster.height, raster.width, channels, data)
    }

    /// Writes P6 (3-channel) or P5 (1-channel) with maxval 255.
    pub fn write_netpbm(&self, path: &Path) -> Result<()> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = Vec::with_capacity(self.data.len() + 32);
        write!(out, "{magic}\n{} {}\n255\n", self.width, self.height)
            .expect("write to Vec cannot fail");
        out.extend(
            self.data
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid_param(
                "mask size",
                format!("{height}x{width} must be at least 1x1"),
            ));
        }
        if bits.len() != height * width {
            return Err(Error::shape(
                "Mask::new",
                format!("{} bits", height * width),
                format!("{}", bits.len()),
            ));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Result<Self> {
        Mask::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Reads a P5 file; samples at or above half of maxval count as
    /// foreground.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let raster = parse_netpbm(path, &bytes)?;
        if raster.magic != Magic::P5 {
            return Err(Error::parse(path, 1, "expected P5 mask, found P6"));
        }
        let bits = raster
            .samples
            .iter()
            .map(|&b| b as u16 * 2 >= raster.maxval as u16)
            .collect();
        Mask::new(raster.height, raster.width, bits)
    }

    /// Writes a P5 file with 255 for foreground, 0 for background.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.bits.len() + 32);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)
            .expect("write to Vec cannot fail");
        out.extend(self.bits.iter().map(|&b| if b { 255u8 } else { 0u8 }));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Magic {
    P5,
    P6,
}

struct Raster {
    magic: Magic,
    width: usize,
    height: usize,
    maxval: u32,
    samples: Vec<u8>,
}

fn parse_netpbm(path: &Path, bytes: &[u8]) -> Result<Raster> {
    let err = |reason: String| Error::parse(path, 0, reason);
    let magic = match bytes.get(0..2) {
        Some(b"P5") => Magic::P5,
        Some(b"P6") => Magic::P6,
        Some(other) => {
            return Err(err(format!(
                "not a binary Netpbm file (magic {:?})",
                String::from_utf8_lossy(other)
            )))
        }
        None => return Err(err("file shorter than a Netpbm header".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in &mut fields {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err("truncated header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err(format!(
                "expected a number in header, found byte {:?}",
                bytes[pos] as char
            )));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text
            .parse()
            .map_err(|_| err(format!("header value {text} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(err(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err(format!("unsupported maxval {maxval} (need 1..=255)")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err("missing whitespace after maxval".into())),
    }
    let per_pixel = match magic {
        Magic::P5 => 1,
        Magic::P6 => 3,
    };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(per_pixel))
        .ok_or_else(|| err(format!("raster size overflows: {width}x{height}")))?;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| {
        err(format!(
            "truncated raster: need {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        ))
    })?;
    Ok(Raster {
        magic,
        width,
        height,
        maxval: maxval as u32,
        samples: raster.to_vec(),
    })
}
