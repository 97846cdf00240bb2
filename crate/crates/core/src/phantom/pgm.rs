//! Binary portable graymap (`P5`) I/O.
//!
//! Images are written with maxval 65535 (big-endian 16-bit samples);
//! values are clamped to `[0, 1]` and quantised to the nearest level.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Image, Mask};

pub const PGM_MAXVAL: u16 = u16::MAX;

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, PGM_MAXVAL).into_bytes();
    out.reserve(image.data.len() * 2);
    for &v in &image.data {
        let q = (v.clamp(0.0, 1.0) * PGM_MAXVAL as f64).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write_pgm(path, &mask.to_image())
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |reason: &str| Error::ImageFormat {
        path: path.to_path_buf(),
        reason: reason.to_owned(),
    };
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(bad("maxval out of range"));
    }
    pos += 1;
    let sample = if maxval > 255 { 2 } else { 1 };
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() < width * height * sample {
        return Err(bad("truncated pixel data"));
    }
    let scale = 1.0 / maxval as f64;
    let data = (0..width * height)
        .map(|i| {
            let v = if sample == 2 {
                u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
            } else {
                body[i] as f64
            };
            v * scale
        })
        .collect();
    Image::new(height, width, data)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    Ok(Mask::from_image(&read_pgm(path)?, 0.5))
}
