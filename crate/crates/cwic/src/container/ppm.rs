//! Binary PPM (P6, maxval 255) reader and writer.

use std::io::Read;
use std::path::Path;

use super::ContainerError;

/// 8-bit RGB image, interleaved row-major samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> RawImage {
        assert_eq!(rgb.len(), width * height * 3);
        RawImage { width, height, rgb }
    }

    /// Planar f64 copy in `[0,1]`, channel-major `[3, H, W]` as the
    /// networks expect.
    pub fn to_planes(&self) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[(c * h + y) * w + x] = self.rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                }
            }
        }
        out
    }

    /// Inverse of [`RawImage::to_planes`]: clamp to `[0,1]` and quantize
    /// to 8 bits with round-to-nearest.
    pub fn from_planes(width: usize, height: usize, planes: &[f64]) -> RawImage {
        assert_eq!(planes.len(), 3 * width * height);
        let mut rgb = vec![0u8; width * height * 3];
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    let v = planes[(c * height + y) * width + x].clamp(0.0, 1.0);
                    rgb[(y * width + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        RawImage { width, height, rgb }
    }
}

fn skip_whitespace_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_number(bytes: &[u8], pos: usize) -> Result<(usize, usize), ContainerError> {
    let start = skip_whitespace_and_comments(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(ContainerError::PpmFormat(format!(
            "expected a decimal number at byte {start}"
        )));
    }
    let text = std::str::from_utf8(&bytes[start..end]).expect("ascii digits");
    let value: usize = text
        .parse()
        .map_err(|_| ContainerError::PpmFormat(format!("number out of range at byte {start}")))?;
    Ok((value, end))
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage, ContainerError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = bytes.get(..2).unwrap_or(b"");
        return Err(ContainerError::PpmFormat(format!(
            "not a binary PPM: magic {:?}, expected \"P6\"",
            String::from_utf8_lossy(found)
        )));
    }
    let (width, pos) = read_number(bytes, 2)?;
    let (height, pos) = read_number(bytes, pos)?;
    let (maxval, pos) = read_number(bytes, pos)?;
    if maxval != 255 {
        return Err(ContainerError::PpmFormat(format!(
            "maxval {maxval} unsupported, expected 255"
        )));
    }
    if width == 0 || height == 0 {
        return Err(ContainerError::PpmFormat(format!(
            "degenerate dimensions {width}x{height}"
        )));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ContainerError::PpmFormat(
            "missing whitespace after maxval".into(),
        ));
    }
    let data_start = pos + 1;
    let need = width * height * 3;
    let avail = bytes.len() - data_start;
    if avail < need {
        return Err(ContainerError::PpmFormat(format!(
            "pixel data truncated: need {need} bytes, have {avail}"
        )));
    }
    Ok(RawImage {
        width,
        height,
        rgb: bytes[data_start..data_start + need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<RawImage, ContainerError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

pub fn encode_ppm(image: &RawImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.rgb);
    out
}

pub fn write_ppm(image: &RawImage, path: &Path) -> Result<(), ContainerError> {
    Ok(std::fs::write(path, encode_ppm(image))?)
}
