//! Shared fixtures for the benchmarks.

use psnet::density::{Point, PointSet};
use psnet::{SeededRng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32)
}

pub fn random_points(n: usize, width: usize, height: usize, seed: u64) -> PointSet {
    let mut rng = SeededRng::new(seed);
    let points = (0..n)
        .map(|_| Point::new(rng.uniform(0.0, width as f64), rng.uniform(0.0, height as f64)))
        .collect();
    PointSet::new(points, width, height).expect("points drawn inside the image")
}
