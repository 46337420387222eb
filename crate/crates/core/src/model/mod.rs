//! The pyramid scale network: truncated-VGG backbone, stacked pyramid scale
//! modules (global attention + feature pyramid with message passing) and a
//! four-layer regression head.

mod checkpoint;
mod forward;
mod structure;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, SeededRng, Tensor};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use forward::{Bound, FpmOutput, ForwardOutput, PsmOutput};
pub use structure::{NodeKind, Stage, StructNode, Structure};

/// Spatial reduction of the backbone (three 2×2 poolings).
pub const OUTPUT_STRIDE: usize = 8;

/// Standard deviation of the Gaussian used for every layer after the backbone.
pub const INIT_STD: f64 = 0.01;

/// Which PSM components are enabled. Named combinations follow the ablation
/// ladder Baseline → Baseline-FPM → Baseline-PSM → PSNet; the last differs
/// from Baseline-PSM only by its training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub message_passing: bool,
    pub gam: bool,
    pub use_dilation: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self::psnet()
    }
}

impl Variant {
    pub fn baseline() -> Self {
        Self {
            message_passing: false,
            gam: false,
            use_dilation: false,
        }
    }

    pub fn baseline_fpm() -> Self {
        Self {
            message_passing: true,
            ..Self::baseline()
        }
    }

    pub fn psnet() -> Self {
        Self {
            message_passing: true,
            gam: true,
            use_dilation: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.message_passing, self.gam, self.use_dilation) {
            (false, false, false) => "Baseline",
            (true, false, false) => "Baseline-FPM",
            (true, true, false) => "Baseline-PSM",
            (true, true, true) => "PSNet-dilation",
            _ => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel multiplier; 64 reproduces the VGG-16 widths 64/128/256/512.
    pub base_width: usize,
    pub psm_count: usize,
    pub branch_kernels: Vec<usize>,
    pub reduction_ratio: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 64,
            psm_count: 3,
            branch_kernels: vec![3, 5, 7, 9],
            reduction_ratio: 16,
            variant: Variant::psnet(),
        }
    }
}

impl ModelConfig {
    pub fn desk(base_width: usize, variant: Variant) -> Self {
        Self {
            base_width,
            variant,
            ..Self::default()
        }
    }

    /// Channels flowing through the PSM stack.
    pub fn psm_channels(&self) -> usize {
        8 * self.base_width
    }

    pub fn branches(&self) -> usize {
        self.branch_kernels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.psm_channels();
        let s = self.branches();
        if self.base_width == 0 || self.psm_count == 0 || self.reduction_ratio == 0 {
            return Err(Error::Config(
                "base_width, psm_count and reduction_ratio must be positive".into(),
            ));
        }
        if s < 2 {
            return Err(Error::Config("a pyramid needs at least two branches".into()));
        }
        if !self.branch_kernels.windows(2).all(|w| w[0] < w[1]) || self.branch_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "branch kernels must be odd and strictly increasing, got {:?}",
                self.branch_kernels
            )));
        }
        if !c.is_multiple_of(s) || !c.is_multiple_of(self.reduction_ratio) {
            return Err(Error::Config(format!(
                "PSM width {c} must be divisible by the branch count {s} and by the reduction ratio {}",
                self.reduction_ratio
            )));
        }
        Ok(())
    }

    /// (kernel, dilation) actually used by branch `b`.
    pub fn branch_geometry(&self, b: usize) -> (usize, usize) {
        let k = self.branch_kernels[b];
        if self.variant.use_dilation {
            (3, (k - 1) / 2)
        } else {
            (k, 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// A convolution: indices into the parameter list plus geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: usize,
    pub bias: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub relu: bool,
}

impl ConvLayer {
    pub fn spec(&self) -> ConvSpec {
        ConvSpec::same(self.kernel, self.dilation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackboneLayer {
    Conv(ConvLayer),
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GamLayers {
    pub squeeze: ConvLayer,
    pub excite: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchLayers {
    pub reduce: ConvLayer,
    pub conv: ConvLayer,
    /// Fusion of this branch's output with the previous branch's final output.
    pub pass: Option<ConvLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsmLayers {
    pub gam: Option<GamLayers>,
    pub branches: Vec<BranchLayers>,
    pub fuse: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsnetModel<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    backbone: Vec<BackboneLayer>,
    psms: Vec<PsmLayers>,
    head: Vec<ConvLayer>,
}

enum Init {
    FanIn,
    Small,
}

struct Builder<'r> {
    rng: &'r mut SeededRng,
    params: Vec<Param<f64>>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, dilation: usize, relu: bool, init: Init) -> ConvLayer {
        let fan_in = c_in * kernel * kernel;
        let std = match init {
            Init::FanIn => (2.0 / fan_in as f64).sqrt(),
            Init::Small => INIT_STD,
        };
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| rng.normal(0.0, std));
        self.params.push(Param {
            name: format!("{name}.weight"),
            tensor: w,
        });
        self.params.push(Param {
            name: format!("{name}.bias"),
            tensor: Tensor::zeros(&[c_out]),
        });
        ConvLayer {
            weight: self.params.len() - 2,
            bias: self.params.len() - 1,
            c_in,
            c_out,
            kernel,
            dilation,
            relu,
        }
    }
}

/// VGG-16's first ten convolutions and three poolings, as (convs per block).
const VGG_BLOCKS: [usize; 4] = [2, 2, 3, 3];

/// Builds a freshly initialized network. Backbone weights are drawn from a
/// fan-in scaled Gaussian, every later weight from N(0, 0.01²); biases are zero.
pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &mut SeededRng) -> Result<PsnetModel<T>> {
    config.validate()?;
    let bw = config.base_width;
    let mut b = Builder {
        rng,
        params: Vec::new(),
    };

    let mut backbone = Vec::new();
    let mut c_in = 3;
    for (block, &n) in VGG_BLOCKS.iter().enumerate() {
        let width = bw << block;
        for i in 0..n {
            let name = format!("backbone.conv{}_{}", block + 1, i + 1);
            backbone.push(BackboneLayer::Conv(b.conv(&name, c_in, width, 3, 1, true, Init::FanIn)));
            c_in = width;
        }
        if block < VGG_BLOCKS.len() - 1 {
            backbone.push(BackboneLayer::Pool);
        }
    }

    let c = config.psm_channels();
    let s = config.branches();
    let part = c / s;
    let mut psms = Vec::with_capacity(config.psm_count);
    for k in 0..config.psm_count {
        let p = format!("psm{k}");
        let gam = config.variant.gam.then(|| GamLayers {
            squeeze: b.conv(&format!("{p}.gam.squeeze"), c, c / config.reduction_ratio, 1, 1, true, Init::Small),
            excite: b.conv(&format!("{p}.gam.excite"), c / config.reduction_ratio, c, 1, 1, false, Init::Small),
        });
        let branches = (0..s)
            .map(|i| {
                let (kernel, dilation) = config.branch_geometry(i);
                let reduce = b.conv(&format!("{p}.branch{i}.reduce"), c, part, 1, 1, true, Init::Small);
                let conv = b.conv(&format!("{p}.branch{i}.conv"), part, part, kernel, dilation, true, Init::Small);
                let pass = (config.variant.message_passing && i > 0)
                    .then(|| b.conv(&format!("{p}.branch{i}.pass"), 2 * part, part, 3, 1, true, Init::Small));
                BranchLayers { reduce, conv, pass }
            })
            .collect();
        let fuse = b.conv(&format!("{p}.fuse"), c, c, 3, 1, true, Init::Small);
        psms.push(PsmLayers { gam, branches, fuse });
    }

    let head_widths = [4 * bw, 2 * bw, bw];
    let mut head = Vec::with_capacity(4);
    let mut c_in = c;
    for (i, &w) in head_widths.iter().enumerate() {
        head.push(b.conv(&format!("head.conv{}", i + 1), c_in, w, 3, 1, true, Init::Small));
        c_in = w;
    }
    head.push(b.conv("head.conv4", c_in, 1, 1, 1, false, Init::Small));

    let params = b
        .params
        .into_iter()
        .map(|p| Param {
            name: p.name,
            tensor: p.tensor.cast(),
        })
        .collect();
    Ok(PsnetModel {
        config: config.clone(),
        params,
        backbone,
        psms,
        head,
    })
}

impl<T: Scalar> PsnetModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn backbone(&self) -> &[BackboneLayer] {
        &self.backbone
    }

    pub fn psms(&self) -> &[PsmLayers] {
        &self.psms
    }

    pub fn head(&self) -> &[ConvLayer] {
        &self.head
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> PsnetModel<U> {
        PsnetModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            backbone: self.backbone.clone(),
            psms: self.psms.clone(),
            head: self.head.clone(),
        }
    }

    /// Channel count leaving the backbone.
    pub fn backbone_channels(&self) -> usize {
        self.config.psm_channels()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_width_backbone_ends_at_512_channels() {
        let m: PsnetModel<f32> = build_model(&ModelConfig::default(), &mut SeededRng::new(0)).unwrap();
        assert_eq!(m.backbone_channels(), 512);
        let last = m
            .backbone()
            .iter()
            .rev()
            .find_map(|l| match l {
                BackboneLayer::Conv(c) => Some(c.c_out),
                BackboneLayer::Pool => None,
            })
            .unwrap();
        assert_eq!(last, 512);
    }

    #[test]
    fn desk_width_backbone_ends_at_64_channels() {
        let m: PsnetModel<f32> = build_model(&ModelConfig::desk(8, Variant::psnet()), &mut SeededRng::new(0)).unwrap();
        assert_eq!(m.backbone_channels(), 64);
        assert_eq!(m.head().iter().map(|c| c.c_out).collect::<Vec<_>>(), vec![32, 16, 8, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::desk(4, Variant::psnet());
        let a: PsnetModel<f32> = build_model(&cfg, &mut SeededRng::new(11)).unwrap();
        let b: PsnetModel<f32> = build_model(&cfg, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
        let c: PsnetModel<f32> = build_model(&cfg, &mut SeededRng::new(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn initialization_statistics() {
        let m: PsnetModel<f64> = build_model(&ModelConfig::desk(8, Variant::psnet()), &mut SeededRng::new(3)).unwrap();
        let mut non_backbone = Vec::new();
        for p in m.params() {
            if p.name.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            } else if !p.name.starts_with("backbone") {
                non_backbone.extend_from_slice(p.tensor.data());
            }
        }
        let n = non_backbone.len() as f64;
        let mean = non_backbone.iter().sum::<f64>() / n;
        let std = (non_backbone.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((std - 0.01).abs() < 5e-4, "{std}");
    }

    #[test]
    fn config_violations_are_rejected() {
        let mut cfg = ModelConfig::desk(8, Variant::psnet());
        cfg.branch_kernels = vec![3, 5, 5, 9];
        assert!(cfg.validate().is_err());
        cfg.branch_kernels = vec![3, 4];
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::desk(1, Variant::psnet()); // 8 channels, r = 16
        assert!(build_model::<f32>(&cfg, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn dilation_variant_uses_three_by_three_kernels() {
        let mut cfg = ModelConfig::desk(4, Variant::psnet());
        cfg.variant.use_dilation = true;
        assert_eq!(
            (0..4).map(|b| cfg.branch_geometry(b)).collect::<Vec<_>>(),
            vec![(3, 1), (3, 2), (3, 3), (3, 4)]
        );
        let dilated: PsnetModel<f32> = build_model(&cfg, &mut SeededRng::new(0)).unwrap();
        let plain: PsnetModel<f32> = build_model(&ModelConfig::desk(4, Variant::psnet()), &mut SeededRng::new(0)).unwrap();
        assert!(dilated.param_count() < plain.param_count());
        for b in &dilated.psms()[0].branches {
            let reach = b.conv.dilation * (b.conv.kernel - 1) + 1;
            assert!([3, 5, 7, 9].contains(&reach));
        }
    }

    #[test]
    fn variant_names() {
        assert_eq!(Variant::baseline().name(), "Baseline");
        assert_eq!(Variant::baseline_fpm().name(), "Baseline-FPM");
        assert_eq!(Variant::psnet().name(), "Baseline-PSM");
    }
}
