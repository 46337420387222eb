use std::fs;
use std::path::Path;

use super::DensityMap;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DMAP";

/// "DMAP", u32 LE height, u32 LE width, then height·width f32 LE, row-major.
pub fn encode_dmap(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dmap(bytes: &[u8], path: &Path) -> Result<DensityMap> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing DMAP header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    let expected = 12 + 4 * h * w;
    if bytes.len() != expected {
        return Err(bad(format!(
            "{h}×{w} map needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DensityMap::new(h, w, values).map_err(|e| bad(e.to_string()))
}

pub fn write_dmap(map: &DensityMap, path: &Path) -> Result<()> {
    fs::write(path, encode_dmap(map)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_dmap(path: &Path) -> Result<DensityMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_dmap(&bytes, path)
}

/// 8-bit P5 visualization, linearly scaled so the map maximum becomes 255.
pub fn write_pgm(map: &DensityMap, path: &Path) -> Result<()> {
    let max = map.values().iter().cloned().fold(0.0f32, f32::max);
    let pixels: Vec<u8> = map
        .values()
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v.max(0.0) / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    crate::data::image::write_pgm_bytes(path, map.width(), map.height(), &pixels)
}
