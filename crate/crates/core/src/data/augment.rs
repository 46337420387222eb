use serde::{Deserialize, Serialize};

use super::Sample;
use crate::density::{Point, PointSet};
use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Training-time augmentation: random scale, random crop, mirror, gamma
/// contrast and grayscale, applied in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    pub crop_size: usize,
    pub mirror_prob: f64,
    pub gamma_range: [f64; 2],
    pub gamma_prob: f64,
    pub gray_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.8, 1.2],
            crop_size: 256,
            mirror_prob: 0.5,
            gamma_range: [0.5, 1.5],
            gamma_prob: 0.3,
            gray_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every random step switched off: unit scale, no flips or colour changes.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            scale_range: [1.0, 1.0],
            crop_size,
            mirror_prob: 0.0,
            gamma_range: [1.0, 1.0],
            gamma_prob: 0.0,
            gray_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "crop_size must be a positive multiple of 8, got {}",
                self.crop_size
            )));
        }
        for (name, p) in [
            ("mirror_prob", self.mirror_prob),
            ("gamma_prob", self.gamma_prob),
            ("gray_prob", self.gray_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale_range [{lo}, {hi}]")));
        }
        let [glo, ghi] = self.gamma_range;
        if !(glo > 0.0 && glo <= ghi) {
            return Err(Error::Config(format!("bad gamma_range [{glo}, {ghi}]")));
        }
        Ok(())
    }
}

/// Bilinear resize to `new_h`×`new_w`; output pixel (x, y) samples the
/// source at (x·w/new_w, y·h/new_h).
fn resize_bilinear(image: &Tensor<f32>, new_h: usize, new_w: usize) -> Tensor<f32> {
    let (c, h, w) = image.chw("resize").expect("feature map");
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    let src = image.data();
    let mut out = vec![0.0f32; c * new_h * new_w];
    let taps = |pos: f64, len: usize| {
        let p = pos.clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..new_w).map(|x| taps(x as f64 * sx, w)).collect();
    for y in 0..new_h {
        let (y0, y1, fy) = taps(y as f64 * sy, h);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let row = &mut out[(ch * new_h + y) * new_w..(ch * new_h + y + 1) * new_w];
            for (o, &(x0, x1, fx)) in row.iter_mut().zip(&xs) {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                *o = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[c, new_h, new_w], out).expect("sized above")
}

/// Index into 0..len after mirror reflection about the borders (edge
/// pixels are not repeated).
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let r = i % period;
    if r < len {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges up to `min_h`×`min_w`. Heads
/// visible in the mirrored region are annotated as reflected copies.
fn reflect_pad(image: &Tensor<f32>, points: Vec<Point>, min_h: usize, min_w: usize) -> (Tensor<f32>, Vec<Point>) {
    let (c, h, w) = image.chw("reflect_pad").expect("feature map");
    let (nh, nw) = (h.max(min_h), w.max(min_w));
    if (nh, nw) == (h, w) {
        return (image.clone(), points);
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                out[(ch * nh + y) * nw + x] = src[(ch * h + sy) * w + reflect(x, w)];
            }
        }
    }
    // Mirror images of a coordinate v on an axis of length n: v + k·2(n−1)
    // and 2(n−1) − v + k·2(n−1).
    let images_of = |v: f64, n: usize, limit: usize| -> Vec<f64> {
        if n == 1 {
            return vec![v];
        }
        let period = 2.0 * (n - 1) as f64;
        let mut out = Vec::new();
        let mut base = 0.0;
        while base < limit as f64 {
            for cand in [base + v, base + period - v] {
                if cand >= 0.0 && cand < limit as f64 && !out.contains(&cand) {
                    out.push(cand);
                }
            }
            base += period;
        }
        out
    };
    let mut padded_points = Vec::with_capacity(points.len());
    for p in &points {
        for y in images_of(p.y, h, nh) {
            for x in images_of(p.x, w, nw) {
                padded_points.push(Point::new(x, y));
            }
        }
    }
    (Tensor::new(&[c, nh, nw], out).expect("sized above"), padded_points)
}

/// Reflect-pads the bottom and right edges so both sides are multiples of `multiple`.
pub fn pad_to_multiple(image: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = image.chw("pad_to_multiple")?;
    let up = |n: usize| n.div_ceil(multiple) * multiple;
    Ok(reflect_pad(image, Vec::new(), up(h), up(w)).0)
}

/// Applies the augmentation chain. The output image is always
/// `crop_size`×`crop_size` and every surviving point lies in `[0, crop_size)²`.
pub fn augment(sample: &Sample, config: &AugmentConfig, rng: &mut SeededRng) -> Result<Sample> {
    config.validate()?;
    let crop = config.crop_size;
    let (_, h, w) = sample.image.chw("augment")?;

    // scale
    let s = rng.uniform(config.scale_range[0], config.scale_range[1]);
    let (mut image, mut points) = if s == 1.0 {
        (sample.image.clone(), sample.annotations.points().to_vec())
    } else {
        let nh = ((h as f64 * s).round() as usize).max(1);
        let nw = ((w as f64 * s).round() as usize).max(1);
        let (fy, fx) = (nh as f64 / h as f64, nw as f64 / w as f64);
        let pts = sample
            .annotations
            .points()
            .iter()
            .map(|p| Point::new(p.x * fx, p.y * fy))
            .filter(|p| p.x < nw as f64 && p.y < nh as f64)
            .collect();
        (resize_bilinear(&sample.image, nh, nw), pts)
    };

    // pad small images, then crop
    (image, points) = reflect_pad(&image, points, crop, crop);
    let (_, h, w) = image.chw("augment")?;
    let oy = rng.int_inclusive(0, h - crop);
    let ox = rng.int_inclusive(0, w - crop);
    let src = image.data();
    let mut cropped = vec![0.0f32; 3 * crop * crop];
    for ch in 0..3 {
        for y in 0..crop {
            let from = (ch * h + oy + y) * w + ox;
            cropped[(ch * crop + y) * crop..(ch * crop + y + 1) * crop].copy_from_slice(&src[from..from + crop]);
        }
    }
    let bound = crop as f64;
    let mut points: Vec<Point> = points
        .into_iter()
        .map(|p| Point::new(p.x - ox as f64, p.y - oy as f64))
        .filter(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < bound && p.y < bound)
        .collect();

    // mirror
    if rng.bernoulli(config.mirror_prob) {
        for ch in 0..3 {
            for y in 0..crop {
                cropped[(ch * crop + y) * crop..(ch * crop + y + 1) * crop].reverse();
            }
        }
        for p in &mut points {
            // points within one pixel of the right edge would land just left of 0
            p.x = (bound - 1.0 - p.x).max(0.0);
        }
    }

    // gamma
    let apply_gamma = rng.bernoulli(config.gamma_prob);
    let gamma = rng.uniform(config.gamma_range[0], config.gamma_range[1]) as f32;
    if apply_gamma {
        cropped.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(gamma));
    }

    // grayscale
    if rng.bernoulli(config.gray_prob) {
        let plane = crop * crop;
        for i in 0..plane {
            let l = 0.299 * cropped[i] + 0.587 * cropped[plane + i] + 0.114 * cropped[2 * plane + i];
            for ch in 0..3 {
                cropped[ch * plane + i] = l;
            }
        }
    }

    Ok(Sample {
        image: Tensor::new(&[3, crop, crop], cropped)?,
        annotations: PointSet::new(points, crop, crop)?,
    })
}
