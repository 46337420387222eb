//! Binary PPM (P6) and PGM (P5) codecs, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

struct Header {
    gray: bool,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let gray = match bytes.get(..2) {
        Some(b"P5") => true,
        Some(b"P6") => false,
        _ => return Err(format_err(path, "not a binary PPM/PGM (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(path, format!("malformed header near byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(path, "header must end with a single whitespace byte"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "empty image"));
    }
    Ok(Header {
        gray,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Decodes a P6 or P5 file into a 3×H×W tensor scaled to [0, 1]. Gray
/// images are replicated across the three channels.
pub fn decode_image_bytes(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let h = parse_header(bytes, path)?;
    let plane = h.width * h.height;
    let channels = if h.gray { 1 } else { 3 };
    let body = &bytes[h.data_start..];
    if body.len() != plane * channels {
        return Err(format_err(
            path,
            format!("expected {} pixel bytes, found {}", plane * channels, body.len()),
        ));
    }
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let b = if h.gray { body[i] } else { body[i * 3 + c] };
            data[c * plane + i] = b as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h.height, h.width], data)
}

pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_image_bytes(&bytes, path)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 encoding of a 3×H×W tensor; values are clamped to [0, 1].
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw("encode_ppm")?;
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * plane);
    let d = image.data();
    for i in 0..plane {
        for ch in 0..3 {
            out.push(quantize(d[ch * plane + i]));
        }
    }
    Ok(out)
}

pub fn write_ppm(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_pgm_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
