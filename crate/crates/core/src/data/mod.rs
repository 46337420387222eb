//! Samples, dataset manifests, the training augmentation chain and the
//! synthetic crowd-scene generator.

mod augment;
pub mod image;
mod manifest;
mod synth;

use crate::density::PointSet;
use crate::tensor::Tensor;

pub use augment::{augment, pad_to_multiple, AugmentConfig};
pub use image::{decode_image, encode_ppm, write_ppm};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
pub use synth::{synth_generate, SynthConfig};

/// An image (3×H×W, values in [0, 1]) with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub annotations: PointSet,
}
