use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::image::write_ppm;
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::density::Point;
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub seed: u64,
}

/// Renders `n_images` synthetic crowd scenes into `out_dir/images/` and writes
/// `out_dir/manifest.json`. Each scene is a smooth textured background with
/// one dark head-like disc per person; disc radius decreases with the row
/// so that scale varies across the frame.
pub fn synth_generate(out_dir: &Path, config: &SynthConfig) -> Result<DatasetManifest> {
    let size = config.image_size;
    if size == 0 || !size.is_multiple_of(8) {
        return Err(Error::Config(format!(
            "image size must be a positive multiple of 8, got {size}"
        )));
    }
    if config.count_min > config.count_max {
        return Err(Error::Config(format!(
            "count range [{}, {}] is empty",
            config.count_min, config.count_max
        )));
    }
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|e| Error::io(format!("creating {}", images_dir.display()), e))?;

    let mut entries = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let mut rng = SeededRng::derive(config.seed, i as u64);
        let (image, points) = render_scene(size, config.count_min, config.count_max, &mut rng);
        let name = format!("images/img_{i:05}.ppm");
        write_ppm(&image, &out_dir.join(&name))?;
        entries.push(ManifestEntry { image: name, points });
    }
    let manifest = DatasetManifest::new(out_dir, entries, Split::Train);
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn render_scene(size: usize, lo: usize, hi: usize, rng: &mut SeededRng) -> (Tensor<f32>, Vec<Point>) {
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];

    // low-frequency background: base colour plus a few slow plane waves
    let base: Vec<f64> = (0..3).map(|_| rng.uniform(0.45, 0.75)).collect();
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.uniform(0.0, 2.0 * PI);
            let freq = rng.uniform(0.5, 2.5) * 2.0 * PI / size as f64;
            (angle.cos() * freq, angle.sin() * freq, rng.uniform(0.0, 2.0 * PI), rng.uniform(0.03, 0.08))
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let t: f64 = waves
                .iter()
                .map(|&(kx, ky, phase, amp)| amp * (kx * x as f64 + ky * y as f64 + phase).sin())
                .sum();
            for (c, b) in base.iter().enumerate() {
                data[c * plane + y * size + x] = (b + t * (1.0 + 0.3 * c as f64)) as f32;
            }
        }
    }

    let count = rng.int_inclusive(lo, hi);
    let r_top = size as f64 / 14.0;
    let r_bottom = size as f64 / 32.0;
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.uniform(0.0, size as f64);
        let y = rng.uniform(0.0, size as f64);
        let radius = r_top + (r_bottom - r_top) * y / size as f64;
        let tone: Vec<f64> = (0..3).map(|_| rng.uniform(0.05, 0.2)).collect();
        let x0 = (x - radius - 1.0).floor().max(0.0) as usize;
        let x1 = ((x + radius + 1.0).ceil() as usize).min(size - 1);
        let y0 = (y - radius - 1.0).floor().max(0.0) as usize;
        let y1 = ((y + radius + 1.0).ceil() as usize).min(size - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let d = (px as f64 - x).hypot(py as f64 - y);
                // one-pixel anti-aliased edge
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for (c, t) in tone.iter().enumerate() {
                        let v = &mut data[c * plane + py * size + px];
                        *v = (*v as f64 * (1.0 - cover) + t * cover) as f32;
                    }
                }
            }
        }
        points.push(Point::new(x, y));
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    (Tensor::new(&[3, size, size], data).expect("sized above"), points)
}
