use super::{BackboneLayer, ConvLayer, PsmLayers, PsnetModel, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Parameter leaves of one model recorded on a tape, aligned with
/// [`PsnetModel::params`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FpmOutput {
    pub fused: Var,
    /// Per-branch outputs before message passing.
    pub raw: Vec<Var>,
    /// Per-branch final outputs (after message passing when enabled).
    pub branches: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct PsmOutput {
    pub out: Var,
    pub fused: Var,
    pub gate: Option<Var>,
    pub branches: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// 1×(H/8)×(W/8) density map.
    pub density: Var,
    /// Final branch outputs, indexed [psm][branch].
    pub branches: Vec<Vec<Var>>,
}

/// Per-channel ImageNet statistics, so that zero padding reads as an average colour.
const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn normalize<T: Scalar>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    let (c, h, w) = tape.value(image).chw("normalize")?;
    if c != 3 {
        return Err(Error::dim("normalize", format!("expected 3 channels, got {c}")));
    }
    let inv_std = tape.constant(Tensor::from_fn(&[3, 1, 1], |i| T::of(1.0 / PIXEL_STD[i])));
    let shift = tape.constant(Tensor::from_fn(&[3, h, w], |i| T::of(-PIXEL_MEAN[i / (h * w)] / PIXEL_STD[i / (h * w)])));
    let scaled = tape.broadcast_mul(image, inv_std)?;
    tape.add(scaled, shift)
}

impl<T: Scalar> PsnetModel<T> {
    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
                .collect(),
        }
    }

    fn conv(&self, tape: &mut Tape<T>, bound: &Bound, layer: &ConvLayer, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.vars[layer.weight], bound.vars[layer.bias], layer.spec())?;
        Ok(if layer.relu { tape.relu(y) } else { y })
    }

    fn psm_layers(&self, k: usize) -> Result<&PsmLayers> {
        self.psms
            .get(k)
            .ok_or_else(|| Error::Config(format!("no PSM {k}; model has {}", self.psms.len())))
    }

    /// Global attention: sigmoid(excite(relu(squeeze(avgpool(x))))), C×1×1.
    pub fn gam_forward(&self, tape: &mut Tape<T>, bound: &Bound, k: usize, input: Var) -> Result<Var> {
        let layers = self.psm_layers(k)?;
        let gam = layers
            .gam
            .as_ref()
            .ok_or_else(|| Error::Config("attention is disabled in this variant".into()))?;
        let (c, _, _) = tape.value(input).chw("gam_forward")?;
        if c % self.config.reduction_ratio != 0 {
            return Err(Error::dim(
                "gam_forward",
                format!("{c} channels not divisible by {}", self.config.reduction_ratio),
            ));
        }
        let pooled = tape.global_avg_pool(input)?;
        let squeezed = self.conv(tape, bound, &gam.squeeze, pooled)?;
        let excited = self.conv(tape, bound, &gam.excite, squeezed)?;
        Ok(tape.sigmoid(excited))
    }

    /// Multi-branch pyramid. Branch i: relu(conv_kᵢ(relu(reduce(x)))). With
    /// message passing, branch i > 0 is then replaced by
    /// relu(pass(concat(branch i, final output of branch i−1))).
    pub fn fpm_forward(&self, tape: &mut Tape<T>, bound: &Bound, k: usize, input: Var) -> Result<FpmOutput> {
        let layers = self.psm_layers(k)?;
        let (c, _, _) = tape.value(input).chw("fpm_forward")?;
        if c % layers.branches.len() != 0 {
            return Err(Error::dim(
                "fpm_forward",
                format!("{c} channels not divisible by {} branches", layers.branches.len()),
            ));
        }
        let mut raw = Vec::with_capacity(layers.branches.len());
        let mut branches: Vec<Var> = Vec::with_capacity(layers.branches.len());
        for b in &layers.branches {
            let reduced = self.conv(tape, bound, &b.reduce, input)?;
            let r = self.conv(tape, bound, &b.conv, reduced)?;
            raw.push(r);
            let out = match (&b.pass, branches.last()) {
                (Some(pass), Some(&prev)) => {
                    let joined = tape.concat_channels(&[r, prev])?;
                    self.conv(tape, bound, pass, joined)?
                }
                _ => r,
            };
            branches.push(out);
        }
        let joined = tape.concat_channels(&branches)?;
        let fused = self.conv(tape, bound, &layers.fuse, joined)?;
        Ok(FpmOutput { fused, raw, branches })
    }

    /// One pyramid scale module: the pyramid's fused output gated channel-wise
    /// by the attention computed from the module input.
    pub fn psm_forward(&self, tape: &mut Tape<T>, bound: &Bound, k: usize, input: Var) -> Result<PsmOutput> {
        let fpm = self.fpm_forward(tape, bound, k, input)?;
        let (out, gate) = if self.psm_layers(k)?.gam.is_some() {
            let gate = self.gam_forward(tape, bound, k, input)?;
            (tape.broadcast_mul(fpm.fused, gate)?, Some(gate))
        } else {
            (fpm.fused, None)
        };
        Ok(PsmOutput {
            out,
            fused: fpm.fused,
            gate,
            branches: fpm.branches,
        })
    }

    pub fn backbone_forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<Var> {
        let mut x = normalize(tape, image)?;
        for layer in &self.backbone {
            x = match layer {
                BackboneLayer::Conv(c) => self.conv(tape, bound, c, x)?,
                BackboneLayer::Pool => tape.maxpool2(x)?,
            };
        }
        Ok(x)
    }

    /// Full network on one 3×H×W image; H and W must be multiples of 8.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, image: Var) -> Result<ForwardOutput> {
        let (c, h, w) = tape.value(image).chw("psnet_forward")?;
        if c != 3 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::dim(
                "psnet_forward",
                format!("expected 3×H×W with H, W divisible by {OUTPUT_STRIDE}, got {c}×{h}×{w}"),
            ));
        }
        let mut x = self.backbone_forward(tape, bound, image)?;
        let mut branches = Vec::with_capacity(self.psms.len());
        for k in 0..self.psms.len() {
            let out = self.psm_forward(tape, bound, k, x)?;
            branches.push(out.branches);
            x = out.out;
        }
        for layer in &self.head {
            x = self.conv(tape, bound, layer, x)?;
        }
        Ok(ForwardOutput { density: x, branches })
    }
}
