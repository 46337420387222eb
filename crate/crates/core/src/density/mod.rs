//! Density-map ground truth from head annotations.
//!
//! Every head contributes a Gaussian truncated at `truncate·σ` and clipped
//! to the image; the clipped kernel is renormalized so each head adds exactly
//! unit mass, which keeps `sum(map) == count` regardless of how close heads
//! sit to the border.

mod io;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_dmap, encode_dmap, read_dmap, write_dmap, write_pgm};

pub const DEFAULT_FIXED_SIGMA: f64 = 15.0;
pub const DEFAULT_KNN: usize = 3;
pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_TRUNCATE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Head annotations of one image, in pixel coordinates where pixel (row i,
/// column j) is centred on (x = j, y = i).
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
    width: usize,
    height: usize,
}

impl PointSet {
    pub fn new(points: Vec<Point>, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim("point_set", format!("empty image {width}×{height}")));
        }
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| !in_bounds(p, width, height)) {
            return Err(Error::dim(
                "point_set",
                format!("point {i} ({}, {}) outside {width}×{height}", p.x, p.y),
            ));
        }
        Ok(Self {
            points,
            width,
            height,
        })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub(crate) fn in_bounds(p: &Point, width: usize, height: usize) -> bool {
    p.x.is_finite() && p.y.is_finite() && p.x >= 0.0 && p.y >= 0.0 && p.x < width as f64 && p.y < height as f64
}

/// Non-negative H×W grid whose sum is the (fractional) person count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::dim("density_map", format!("empty map {height}×{width}")));
        }
        if values.len() != height * width {
            return Err(Error::shape(
                "density_map",
                format!("{height}×{width} needs {} values, got {}", height * width, values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Total mass, accumulated in double precision.
    pub fn count(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// How per-head kernel widths are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum KernelMode {
    Fixed {
        sigma: f64,
    },
    /// σᵢ = β · mean distance to the k nearest other heads; `fallback_sigma`
    /// covers images with a single head.
    Adaptive {
        k: usize,
        beta: f64,
        fallback_sigma: f64,
    },
}

impl Default for KernelMode {
    fn default() -> Self {
        KernelMode::Fixed {
            sigma: DEFAULT_FIXED_SIGMA,
        }
    }
}

impl KernelMode {
    pub fn adaptive() -> Self {
        KernelMode::Adaptive {
            k: DEFAULT_KNN,
            beta: DEFAULT_BETA,
            fallback_sigma: DEFAULT_FIXED_SIGMA,
        }
    }

    pub fn density(&self, points: &PointSet) -> Result<DensityMap> {
        match *self {
            KernelMode::Fixed { sigma } => fixed_kernel_density(points, sigma),
            KernelMode::Adaptive {
                k,
                beta,
                fallback_sigma,
            } => {
                let sigmas = adaptive_sigma(points, k, beta, fallback_sigma)?;
                density_with_sigmas(points, &sigmas, DEFAULT_TRUNCATE)
            }
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("kernel sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Every head blurred by the same Gaussian of width `sigma`.
pub fn fixed_kernel_density(points: &PointSet, sigma: f64) -> Result<DensityMap> {
    check_sigma(sigma)?;
    density_with_sigmas(points, &vec![sigma; points.len()], DEFAULT_TRUNCATE)
}

/// Geometry-adaptive kernel widths. `k` is capped at `count − 1`.
pub fn adaptive_sigma(points: &PointSet, k: usize, beta: f64, fallback_sigma: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    check_sigma(fallback_sigma)?;
    let pts = points.points();
    if pts.len() < 2 {
        return Ok(vec![fallback_sigma; pts.len()]);
    }
    let k = k.min(pts.len() - 1);
    let mut dists = Vec::with_capacity(pts.len() - 1);
    Ok(pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dists.clear();
            dists.extend(
                pts.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| p.dist(q)),
            );
            dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            let nearest = &dists[..k];
            let sigma = beta * nearest.iter().sum::<f64>() / k as f64;
            // coincident annotations would give a zero-width kernel
            if sigma > 0.0 {
                sigma
            } else {
                fallback_sigma
            }
        })
        .collect())
}

/// Adaptive-kernel density map.
pub fn adaptive_kernel_density(
    points: &PointSet,
    k: usize,
    beta: f64,
    fallback_sigma: f64,
) -> Result<DensityMap> {
    let sigmas = adaptive_sigma(points, k, beta, fallback_sigma)?;
    density_with_sigmas(points, &sigmas, DEFAULT_TRUNCATE)
}

/// Places one unit-mass Gaussian per head with the given widths, truncated
/// at `truncate·σ` per side and renormalized over the in-image support.
pub fn density_with_sigmas(points: &PointSet, sigmas: &[f64], truncate: f64) -> Result<DensityMap> {
    if sigmas.len() != points.len() {
        return Err(Error::shape(
            "density",
            format!("{} sigmas for {} points", sigmas.len(), points.len()),
        ));
    }
    let (w, h) = (points.width(), points.height());
    let mut acc = vec![0.0f64; w * h];
    let mut kernel = Vec::new();
    for (p, &sigma) in points.points().iter().zip(sigmas) {
        check_sigma(sigma)?;
        let radius = truncate * sigma;
        let x0 = ((p.x - radius).floor().max(0.0)) as usize;
        let x1 = ((p.x + radius).ceil() as usize).min(w - 1);
        let y0 = ((p.y - radius).floor().max(0.0)) as usize;
        let y1 = ((p.y + radius).ceil() as usize).min(h - 1);
        let inv = 1.0 / (2.0 * sigma * sigma);

        kernel.clear();
        let mut total = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                let v = (-(dx * dx + dy * dy) * inv).exp();
                kernel.push(v);
                total += v;
            }
        }
        if total > 0.0 {
            let mut i = 0;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    acc[y * w + x] += kernel[i] / total;
                    i += 1;
                }
            }
        } else {
            // σ far below a pixel: all mass on the nearest pixel
            let x = (p.x.round() as usize).min(w - 1);
            let y = (p.y.round() as usize).min(h - 1);
            acc[y * w + x] += 1.0;
        }
    }
    DensityMap::new(h, w, acc.into_iter().map(|v| v as f32).collect())
}

/// Sums every `factor`×`factor` block, preserving total mass.
pub fn sum_pool_downsample(map: &DensityMap, factor: usize) -> Result<DensityMap> {
    if factor == 0 || !map.height.is_multiple_of(factor) || !map.width.is_multiple_of(factor) {
        return Err(Error::dim(
            "sum_pool_downsample",
            format!("{}×{} is not divisible by {factor}", map.height, map.width),
        ));
    }
    let (ho, wo) = (map.height / factor, map.width / factor);
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..map.height {
        for x in 0..map.width {
            out[(y / factor) * wo + x / factor] += map.values[y * map.width + x] as f64;
        }
    }
    DensityMap::new(ho, wo, out.into_iter().map(|v| v as f32).collect())
}
