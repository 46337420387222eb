//! Checkpoint layout:
//!
//! ```text
//! PSNET-CHECKPOINT 1
//! base_width=8
//! psm_count=3
//! branch_kernels=3,5,7,9
//! reduction_ratio=16
//! message_passing=true
//! gam=true
//! use_dilation=false
//! param backbone.conv1_1.weight 8x3x3x3 0 216
//! ...
//! ---
//! <little-endian f32 blob>
//! ```
//!
//! Offsets and lengths are in floats from the start of the blob.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{build_model, ModelConfig, PsnetModel, Variant};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

const HEADER: &str = "PSNET-CHECKPOINT 1";
const SEPARATOR: &[u8] = b"\n---\n";

pub fn encode_checkpoint(model: &PsnetModel<f32>) -> Vec<u8> {
    let c = model.config();
    let kernels: Vec<String> = c.branch_kernels.iter().map(|k| k.to_string()).collect();
    let mut text = format!(
        "{HEADER}\nbase_width={}\npsm_count={}\nbranch_kernels={}\nreduction_ratio={}\n\
         message_passing={}\ngam={}\nuse_dilation={}\n",
        c.base_width,
        c.psm_count,
        kernels.join(","),
        c.reduction_ratio,
        c.variant.message_passing,
        c.variant.gam,
        c.variant.use_dilation,
    );
    let mut offset = 0;
    for p in model.params() {
        let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        let len = p.tensor.numel();
        text.push_str(&format!("param {} {} {offset} {len}\n", p.name, shape.join("x")));
        offset += len;
    }
    // drop the final newline, the separator carries it
    text.pop();
    let mut out = text.into_bytes();
    out.extend_from_slice(SEPARATOR);
    out.reserve(4 * offset);
    for p in model.params() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<PsnetModel<f32>> {
    let bad = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    let split = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| bad("missing '---' separator".into()))?;
    let text = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
    let blob = &bytes[split + SEPARATOR.len()..];
    if !blob.len().is_multiple_of(4) {
        return Err(bad(format!("blob length {} is not a multiple of 4", blob.len())));
    }

    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(format!("expected '{HEADER}' header")));
    }
    let mut fields = HashMap::new();
    let mut entries: Vec<(String, Entry)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let at = |m: &str| bad(format!("header line {}: {m}", i + 2));
        if let Some(rest) = line.strip_prefix("param ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, shape, offset, len] = parts[..] else {
                return Err(at("expected 'param NAME SHAPE OFFSET LEN'"));
            };
            let shape = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| at("bad shape"))?;
            let offset = offset.parse().map_err(|_| at("bad offset"))?;
            let len = len.parse().map_err(|_| at("bad length"))?;
            entries.push((name.to_string(), Entry { shape, offset, len }));
        } else {
            let (k, v) = line.split_once('=').ok_or_else(|| at("expected key=value"))?;
            fields.insert(k, v);
        }
    }

    let field = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing field '{k}'")));
    let int = |k: &str| field(k)?.parse::<usize>().map_err(|_| bad(format!("field '{k}' is not an integer")));
    let flag = |k: &str| field(k)?.parse::<bool>().map_err(|_| bad(format!("field '{k}' is not a boolean")));
    let branch_kernels = field("branch_kernels")?
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<Vec<usize>, _>>()
        .map_err(|_| bad("field 'branch_kernels' is not a list of integers".into()))?;
    let config = ModelConfig {
        base_width: int("base_width")?,
        psm_count: int("psm_count")?,
        branch_kernels,
        reduction_ratio: int("reduction_ratio")?,
        variant: Variant {
            message_passing: flag("message_passing")?,
            gam: flag("gam")?,
            use_dilation: flag("use_dilation")?,
        },
    };

    let mut model: PsnetModel<f32> = build_model(&config, &mut SeededRng::new(0)).map_err(|e| bad(e.to_string()))?;
    if entries.len() != model.params().len() {
        return Err(bad(format!(
            "{} parameters listed, configuration needs {}",
            entries.len(),
            model.params().len()
        )));
    }
    let floats = blob.len() / 4;
    for (param, (name, entry)) in model.params_mut().iter_mut().zip(&entries) {
        if *name != param.name || entry.shape != param.tensor.shape() || entry.len != param.tensor.numel() {
            return Err(bad(format!(
                "parameter '{name}' {:?} does not match expected '{}' {:?}",
                entry.shape,
                param.name,
                param.tensor.shape()
            )));
        }
        if entry.offset + entry.len > floats {
            return Err(bad(format!("parameter '{name}' runs past the end of the blob")));
        }
        let start = 4 * entry.offset;
        for (dst, src) in param
            .tensor
            .data_mut()
            .iter_mut()
            .zip(blob[start..start + 4 * entry.len].chunks_exact(4))
        {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &PsnetModel<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<PsnetModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes, path)
}
