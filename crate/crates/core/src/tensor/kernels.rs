//! Forward and backward kernels on C×H×W feature maps. These are pure
//! functions; [`super::Tape`] records them and chains their backward halves.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    /// Stride 1 with the padding that keeps the spatial size of a `kernel`×`kernel`
    /// convolution unchanged.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self, spec: &ConvSpec) -> bool {
        self.kh == 1 && self.kw == 1 && spec.stride == 1 && spec.padding == 0
    }
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGeometry> {
    let (c_in, h, w) = input.chw("conv2d")?;
    let [c_out, wc_in, kh, kw] = weight.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("weights must be C_out×C_in×kh×kw, got {:?}", weight.shape()),
        ));
    };
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c_in} channels, weights expect {wc_in}"),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{c_out}], got {:?}", bias.shape()),
        ));
    }
    match (spec.output_len(h, kh), spec.output_len(w, kw)) {
        (Some(ho), Some(wo)) => Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho,
            wo,
        }),
        _ => Err(Error::dim(
            "conv2d",
            format!(
                "{h}×{w} input with padding {} cannot hold a {kh}×{kw} kernel at dilation {}",
                spec.padding, spec.dilation
            ),
        )),
    }
}

/// Lays every receptive field out as a column: rows are (c, ky, kx),
/// columns are output pixels.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, spec: &ConvSpec) -> Vec<T> {
    let pixels = g.pixels();
    let mut cols = vec![T::zero(); g.rows() * pixels];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, spec: &ConvSpec, dx: &mut [T]) {
    let pixels = g.pixels();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize
                            - spec.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input` (C_in×H×W) with `weight` (C_out×C_in×kh×kw) plus `bias`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, &spec)?;
    let pixels = g.pixels();
    let mut out = vec![T::zero(); g.c_out * pixels];
    for (co, row) in out.chunks_mut(pixels).enumerate() {
        row.fill(bias.data()[co]);
    }
    let cols;
    let cols_ref = if g.is_pointwise(&spec) {
        input.data()
    } else {
        cols = im2col(input.data(), &g, &spec);
        &cols
    };
    T::gemm(
        g.c_out,
        g.rows(),
        pixels,
        weight.data(),
        (g.rows(), 1),
        cols_ref,
        (pixels, 1),
        &mut out,
        true,
    );
    Tensor::new(&[g.c_out, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias. Input
/// gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(input, weight, bias, &spec)?;
    let pixels = g.pixels();
    let dy = grad_out.data();
    let cols;
    let cols_ref = if g.is_pointwise(&spec) {
        input.data()
    } else {
        cols = im2col(input.data(), &g, &spec);
        &cols
    };

    let mut dw = vec![T::zero(); g.c_out * g.rows()];
    T::gemm(
        g.c_out,
        pixels,
        g.rows(),
        dy,
        (pixels, 1),
        cols_ref,
        (1, pixels),
        &mut dw,
        false,
    );
    let db: Vec<T> = dy.chunks(pixels).map(|r| r.iter().copied().sum()).collect();

    let dx = if need_input {
        let mut dcols = vec![T::zero(); g.rows() * pixels];
        T::gemm(
            g.rows(),
            g.c_out,
            pixels,
            weight.data(),
            (1, g.rows()),
            dy,
            (pixels, 1),
            &mut dcols,
            false,
        );
        if g.is_pointwise(&spec) {
            Some(Tensor::new(input.shape(), dcols)?)
        } else {
            let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
            col2im(&dcols, &g, &spec, &mut dx);
            Some(Tensor::new(input.shape(), dx)?)
        }
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(bias.shape(), db)?,
    ))
}

/// 2×2 max pooling with stride 2. Returns the pooled map and, per output
/// cell, the flat input index of the winning element (first in row-major
/// scan order on ties).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2", format!("{h}×{w} is not even")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, argmax))
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw("global_avg_pool")?;
    let n = T::of((h * w) as f64);
    let means = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / n)
        .collect();
    Tensor::new(&[c, 1, 1], means)
}

/// Mean over the channel axis: C×H×W → 1×H×W.
pub fn channel_mean<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw("channel_mean")?;
    let mut out = vec![T::zero(); h * w];
    for plane in input.data().chunks(h * w) {
        for (o, &v) in out.iter_mut().zip(plane) {
            *o += v;
        }
    }
    let n = T::of(c as f64);
    out.iter_mut().for_each(|v| *v = *v / n);
    Tensor::new(&[1, h, w], out)
}

/// C×H×W ⊗ C×1×1: scales every channel plane by its gate value.
pub fn broadcast_mul<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw("broadcast_mul")?;
    if gate.shape() != [c, 1, 1] {
        return Err(Error::shape(
            "broadcast_mul",
            format!("cannot broadcast {:?} over {:?}", gate.shape(), x.shape()),
        ));
    }
    let mut out = x.data().to_vec();
    for (plane, &g) in out.chunks_mut(h * w).zip(gate.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    Tensor::new(x.shape(), out)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::shape("concat_channels", "no parts"));
    };
    let (_, h, w) = first.chw("concat_channels")?;
    let mut channels = 0;
    for p in parts {
        let (c, ph, pw) = p.chw("concat_channels")?;
        if (ph, pw) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial size {ph}×{pw} differs from {h}×{w}"),
            ));
        }
        channels += c;
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[channels, h, w], data)
}

/// Channels `start..start + len` of a C×H×W map.
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw("slice_channels")?;
    if len == 0 || start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("channels {start}..{} out of 0..{c}", start + len),
        ));
    }
    let plane = h * w;
    Tensor::new(
        &[len, h, w],
        input.data()[start * plane..(start + len) * plane].to_vec(),
    )
}
