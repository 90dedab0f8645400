//! 8-bit binary PGM (P5) and PPM (P6) images.
//!
//! Pixels map to `v/255 − 0.5` on load; tensors are `[C, H, W]` with C = 1
//! for PGM and C = 3 for PPM.

use std::fs;
use std::path::Path;

use flowprox_core::numerics::Tensor;

use crate::error::{CliError, Result};

pub fn to_byte(x: f64) -> u8 {
    let v = (255.0 * (x + 0.5)).round();
    if v.is_nan() {
        0
    } else {
        v.clamp(0.0, 255.0) as u8
    }
}

pub fn from_byte(v: u8) -> f64 {
    v as f64 / 255.0 - 0.5
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format!("expected a number in the header at byte {start}"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|_| "header number out of range".to_string())
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM (P5) or PPM (P6) file".into()),
    };
    let mut pos = 2;
    let width = header_token(bytes, &mut pos)?;
    let height = header_token(bytes, &mut pos)?;
    let maxval = header_token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(format!("only 8-bit images (maxval 255) are supported, got maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("image has zero size".into());
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after the header".into()),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or("image dimensions overflow")?;
    let pixels = &bytes[pos..];
    if pixels.len() < expected {
        return Err(format!("expected {expected} pixel bytes, found {}", pixels.len()));
    }
    let plane = width * height;
    let mut data = vec![0.0; expected];
    for (i, &v) in pixels[..expected].iter().enumerate() {
        let (p, c) = (i / channels, i % channels);
        data[c * plane + p] = from_byte(v);
    }
    Tensor::from_vec(&[channels, height, width], data).map_err(|e| e.to_string())
}

pub fn encode(image: &Tensor) -> std::result::Result<Vec<u8>, String> {
    let &[channels, height, width] = image.shape() else {
        return Err(format!("expected a [C, H, W] image, got shape {:?}", image.shape()));
    };
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(format!("cannot store {c} channels as PGM/PPM (need 1 or 3)")),
    };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    let plane = width * height;
    let data = image.data();
    out.reserve(plane * channels);
    for p in 0..plane {
        for c in 0..channels {
            out.push(to_byte(data[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|msg| CliError::format(path, msg))
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode(image).map_err(|msg| CliError::format(path, msg))?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// File extension matching the channel count.
pub fn extension_for(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}
