//! Counting metrics, branch-similarity diagnostics and single-image prediction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{decode_image, pad_to_multiple, DatasetManifest};
use crate::density::{write_dmap, write_pgm, DensityMap};
use crate::error::{Error, Result};
use crate::losses::{attention_vector, guarded_cosine, variance_loss, AttentionRecord};
use crate::model::{PsnetModel, OUTPUT_STRIDE};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub mean_variance_loss: f64,
    /// (predicted count, ground-truth count) per image, in manifest order.
    pub per_image: Vec<(f64, f64)>,
    /// One S×S matrix per PSM: mean cosine similarity of branch attention vectors.
    pub pairwise_similarity: Vec<Vec<Vec<f64>>>,
}

pub fn mae(counts: &[(f64, f64)]) -> f64 {
    counts.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / counts.len() as f64
}

pub fn rmse(counts: &[(f64, f64)]) -> f64 {
    (counts.iter().map(|(p, g)| (p - g).powi(2)).sum::<f64>() / counts.len() as f64).sqrt()
}

/// Density map and per-PSM, per-branch attention vectors for one image.
/// The image is reflect-padded up to a multiple of the output stride.
pub fn infer(model: &PsnetModel<f32>, image: &Tensor<f32>) -> Result<(DensityMap, Vec<Vec<Vec<f64>>>)> {
    let padded = pad_to_multiple(image, OUTPUT_STRIDE)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.constant(padded);
    let out = model.forward(&mut tape, &bound, x)?;
    let density = tape.value(out.density);
    let (_, h, w) = density.chw("infer")?;
    let map = DensityMap::new(h, w, density.data().to_vec())?;
    let vectors = out
        .branches
        .iter()
        .map(|psm| psm.iter().map(|&b| attention_vector(tape.value(b))).collect())
        .collect::<Result<_>>()?;
    Ok((map, vectors))
}

/// Runs the model over every image of `manifest` at full resolution.
pub fn evaluate(model: &PsnetModel<f32>, manifest: &DatasetManifest, epsilon: f64) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Config("evaluation manifest is empty".into()));
    }
    let k = model.config().psm_count;
    let s = model.config().branches();
    let mut per_image = Vec::with_capacity(manifest.len());
    let mut record = AttentionRecord::default();
    let mut similarity = vec![vec![vec![0.0; s]; s]; k];
    for i in 0..manifest.len() {
        let sample = manifest.load_sample(i)?;
        let (map, vectors) = infer(model, &sample.image)?;
        per_image.push((map.count(), sample.annotations.len() as f64));
        for (matrix, branches) in similarity.iter_mut().zip(&vectors) {
            for a in 0..s {
                for b in a + 1..s {
                    let c = guarded_cosine(&branches[a], &branches[b], epsilon);
                    matrix[a][b] += c;
                    matrix[b][a] += c;
                }
            }
        }
        record.push(vectors)?;
    }
    let n = manifest.len() as f64;
    for matrix in &mut similarity {
        for (a, row) in matrix.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = if a == b { 1.0 } else { *v / n };
            }
        }
    }
    Ok(EvalReport {
        mae: mae(&per_image),
        rmse: rmse(&per_image),
        mean_variance_loss: variance_loss(&record, epsilon)?,
        per_image,
        pairwise_similarity: similarity,
    })
}

pub fn similarity_report(model: &PsnetModel<f32>, manifest: &DatasetManifest, epsilon: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    Ok(evaluate(model, manifest, epsilon)?.pairwise_similarity)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub images: usize,
    pub mean_predicted: f64,
    pub mean_ground_truth: f64,
}

/// Sorts images by ground-truth count and splits them into `n_groups`
/// contiguous groups of equal size; the remainder joins the last group.
pub fn scale_group_report(report: &EvalReport, n_groups: usize) -> Result<Vec<GroupSummary>> {
    let n = report.per_image.len();
    if n == 0 {
        return Err(Error::Config("report has no images".into()));
    }
    if n_groups == 0 || n_groups > n {
        return Err(Error::Config(format!("cannot split {n} images into {n_groups} groups")));
    }
    let mut sorted = report.per_image.clone();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let size = n / n_groups;
    Ok((0..n_groups)
        .map(|g| {
            let end = if g + 1 == n_groups { n } else { (g + 1) * size };
            let group = &sorted[g * size..end];
            let len = group.len() as f64;
            GroupSummary {
                images: group.len(),
                mean_predicted: group.iter().map(|c| c.0).sum::<f64>() / len,
                mean_ground_truth: group.iter().map(|c| c.1).sum::<f64>() / len,
            }
        })
        .collect())
}

/// Writes the density map of `image_path` to `out_path` (DMAP) and a PGM
/// preview next to it; returns the map.
pub fn predict(model: &PsnetModel<f32>, image_path: &Path, out_path: &Path) -> Result<DensityMap> {
    let image = decode_image(image_path)?;
    let (map, _) = infer(model, &image)?;
    write_dmap(&map, out_path)?;
    write_pgm(&map, &out_path.with_extension("pgm"))?;
    Ok(map)
}
