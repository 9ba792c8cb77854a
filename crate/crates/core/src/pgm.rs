//! 8-bit binary PGM (P5) reading and writing.
//!
//! Images store intensities scaled to 0..=255; label files store raw class
//! indices in the same container.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>, // row-major
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Data(format!(
            "pgm payload of {} bytes does not match {width}x{height}",
            pixels.len()
        )));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf = Vec::with_capacity(pixels.len() + 32);
    write!(buf, "P5\n{width} {height}\n255\n").expect("in-memory write");
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|msg| Error::Data(format!("{}: {msg}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Pgm, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<Vec<u8>, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(bytes[start..pos].to_vec())
    };
    let magic = token(bytes)?;
    if magic != b"P5" {
        return Err("not a P5 pgm".into());
    }
    let width: usize = String::from_utf8_lossy(&token(bytes)?)
        .parse()
        .map_err(|_| "bad width")?;
    let height: usize = String::from_utf8_lossy(&token(bytes)?)
        .parse()
        .map_err(|_| "bad height")?;
    let maxval: usize = String::from_utf8_lossy(&token(bytes)?)
        .parse()
        .map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err("truncated payload".into());
    }
    Ok(Pgm {
        width,
        height,
        pixels: bytes[pos..pos + need].to_vec(),
    })
}

/// Maps a `[0, 1]` intensity to an 8-bit value.
pub fn quantize_intensity(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Maps an 8-bit file value back to a `[0, 1]` intensity.
pub fn dequantize_intensity(v: u8) -> f64 {
    v as f64 / 255.0
}
