#![allow(dead_code)]

use psnet::losses::{attention_vector_var, euclidean_loss_var, total_loss_var, variance_loss_var};
use psnet::model::{build_model, Bound, ModelConfig, PsnetModel, Variant};
use psnet::tensor::grad_check;
use psnet::{ConvSpec, GradCheckReport, Result, SeededRng, Tape, Tensor, Var};

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Direct convolution: for every output pixel, sum over input channels and
/// kernel taps, skipping taps that land in the zero padding.
pub fn conv_direct(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Tensor<f64> {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let reach = dilation * (k - 1) + 1;
    let ho = (h + 2 * padding - reach) / stride + 1;
    let wo = (wd + 2 * padding - reach) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[(c * h + iy as usize) * wd + ix as usize];
                            let wv = w.data()[((o * c_in + c) * k + ky) * k + kx];
                            acc += xv * wv;
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[c_out, ho, wo], out).unwrap()
}

pub const FD_STEP: f64 = 1e-3;
/// The full network has thousands of relu kinks; a shorter step makes
/// crossing one during a perturbation correspondingly unlikely.
pub const MODEL_FD_STEP: f64 = 1e-5;

/// Values bounded away from zero so relu, max and division stay smooth
/// within one finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform(0.1, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Values whose pairwise gaps exceed the finite-difference step, so that no
/// pooling window changes its maximum under perturbation.
pub fn distinct(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    rng.shuffle(&mut values);
    Tensor::new(shape, values).unwrap()
}

type Graph = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: Graph) -> (&'static str, GradCheckReport) {
    let report = grad_check(f, &inputs, FD_STEP, None).unwrap_or_else(|e| panic!("{name}: {e}"));
    (name, report)
}

/// One finite-difference check per differentiable operation and per loss.
pub fn op_gradient_reports() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = SeededRng::new(99);
    let r = &mut rng;
    let mut out = Vec::new();
    for (name, spec, k) in [
        ("conv2d 3x3", ConvSpec::same(3, 1), 3),
        ("conv2d 3x3 dilation 2", ConvSpec::same(3, 2), 3),
        ("conv2d 1x1", ConvSpec::same(1, 1), 1),
        (
            "conv2d stride 2",
            ConvSpec {
                stride: 2,
                padding: 1,
                dilation: 1,
            },
            3,
        ),
    ] {
        out.push(case(
            name,
            vec![uniform(&[2, 5, 5], -1.0, 1.0, r), uniform(&[3, 2, k, k], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)],
            Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], spec)),
        ));
    }
    out.push(case("maxpool2", vec![distinct(&[2, 4, 6], r)], Box::new(|t, v| t.maxpool2(v[0]))));
    out.push(case("global_avg_pool", vec![uniform(&[3, 3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.global_avg_pool(v[0]))));
    out.push(case("channel_mean", vec![uniform(&[3, 3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.channel_mean(v[0]))));
    out.push(case("relu", vec![away_from_zero(&[2, 3, 3], r)], Box::new(|t, v| Ok(t.relu(v[0])))));
    out.push(case("sigmoid", vec![uniform(&[2, 3, 3], -3.0, 3.0, r)], Box::new(|t, v| Ok(t.sigmoid(v[0])))));
    let pair = |r: &mut SeededRng| vec![uniform(&[2, 2, 3], -1.0, 1.0, r), uniform(&[2, 2, 3], -1.0, 1.0, r)];
    out.push(case("add", pair(r), Box::new(|t, v| t.add(v[0], v[1]))));
    out.push(case("sub", pair(r), Box::new(|t, v| t.sub(v[0], v[1]))));
    out.push(case("mul", pair(r), Box::new(|t, v| t.mul(v[0], v[1]))));
    out.push(case(
        "div",
        vec![uniform(&[2, 2, 3], -1.0, 1.0, r), uniform(&[2, 2, 3], 0.5, 2.0, r)],
        Box::new(|t, v| t.div(v[0], v[1])),
    ));
    out.push(case(
        "broadcast_mul",
        vec![uniform(&[3, 2, 2], -1.0, 1.0, r), uniform(&[3, 1, 1], -1.0, 1.0, r)],
        Box::new(|t, v| t.broadcast_mul(v[0], v[1])),
    ));
    out.push(case("scale", vec![uniform(&[2, 3], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))));
    out.push(case(
        "concat_channels",
        vec![uniform(&[1, 2, 2], -1.0, 1.0, r), uniform(&[2, 2, 2], -1.0, 1.0, r)],
        Box::new(|t, v| t.concat_channels(&[v[0], v[1], v[0]])),
    ));
    out.push(case("slice_channels", vec![uniform(&[4, 2, 2], -1.0, 1.0, r)], Box::new(|t, v| t.slice_channels(v[0], 1, 2))));
    out.push(case("flatten", vec![uniform(&[2, 2, 3], -1.0, 1.0, r)], Box::new(|t, v| t.flatten(v[0]))));
    out.push(case("sum", vec![uniform(&[2, 2, 3], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.sum(v[0])))));
    out.push(case("dot", vec![uniform(&[6], -1.0, 1.0, r), uniform(&[6], -1.0, 1.0, r)], Box::new(|t, v| t.dot(v[0], v[1]))));
    out.push(case("norm", vec![uniform(&[6], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.norm(v[0])))));
    out.push(case("max_const", vec![away_from_zero(&[8], r)], Box::new(|t, v| Ok(t.max_const(v[0], 0.0)))));
    out.push(case(
        "attention_vector",
        vec![uniform(&[4, 3, 3], 0.0, 1.0, r)],
        Box::new(|t, v| attention_vector_var(t, v[0])),
    ));
    out.push(case(
        "variance loss",
        (0..8).map(|_| uniform(&[6], 0.05, 1.0, r)).collect(),
        Box::new(|t, v| variance_loss_var(t, &[v[..4].to_vec(), v[4..].to_vec()], 1e-6)),
    ));
    out.push(case(
        "euclidean loss",
        (0..4).map(|_| uniform(&[1, 3, 3], -1.0, 1.0, r)).collect(),
        Box::new(|t, v| euclidean_loss_var(t, &v[..2], &v[2..])),
    ));
    out.push(case(
        "total loss",
        vec![uniform(&[1], 0.0, 3.0, r), uniform(&[1], 0.0, 1.0, r)],
        Box::new(|t, v| total_loss_var(t, v[0], v[1], 0.7)),
    ));
    out
}

/// Tiny double-precision network with random weights of moderate size,
/// total loss L_E + L_M on one 16×16 image.
pub fn model_gradient_report(n_params: usize, seed: u64) -> GradCheckReport {
    let mut cfg = ModelConfig::desk(2, Variant::psnet());
    cfg.reduction_ratio = 4;
    let mut model: PsnetModel<f64> = build_model(&cfg, &mut SeededRng::new(seed)).unwrap();
    let mut rng = SeededRng::new(seed + 1);
    // small init would leave most relus at exactly zero; redraw every
    // tensor, biases included, so the check exercises live paths
    for p in model.params_mut() {
        let shape = p.tensor.shape().to_vec();
        let std = if shape.len() == 4 {
            (1.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt()
        } else {
            0.1
        };
        for v in p.tensor.data_mut() {
            *v = rng.normal(0.0, std);
        }
    }
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform(0.0, 1.0));
    let target = Tensor::from_fn(&[1, 2, 2], |_| rng.uniform(0.0, 0.5));
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let coords: Vec<(usize, usize)> = (0..n_params)
        .map(|_| {
            let i = rng.int_inclusive(0, inputs.len() - 1);
            (i, rng.int_inclusive(0, inputs[i].numel() - 1))
        })
        .collect();
    grad_check(
        |tape, vars| {
            let bound = Bound { vars: vars.to_vec() };
            let x = tape.constant(image.clone());
            let out = model.forward(tape, &bound, x)?;
            let t = tape.constant(target.clone());
            let l_e = euclidean_loss_var(tape, &[out.density], &[t])?;
            let groups = out
                .branches
                .iter()
                .map(|g| g.iter().map(|&b| attention_vector_var(tape, b)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let l_m = variance_loss_var(tape, &groups, 1e-6)?;
            total_loss_var(tape, l_e, l_m, 1.0)
        },
        &inputs,
        MODEL_FD_STEP,
        Some(&coords),
    )
    .unwrap()
}
