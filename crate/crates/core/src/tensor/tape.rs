use super::kernels::{self, ConvSpec};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: ConvSpec,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    ChannelMean(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    BroadcastMul {
        x: Var,
        gate: Var,
    },
    Scale(Var, T),
    Concat(Vec<Var>),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Dot(Var, Var),
    Norm(Var),
    MaxConst(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations. Values are computed eagerly when
/// an operation is recorded; [`Tape::backward`] replays the record in reverse.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves with `requires_grad` (and everything
    /// computed from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(weight), self.value(bias), spec)?;
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            needs,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2(self.value(input))?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, needs))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(input))?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::GlobalAvgPool(input), needs))
    }

    pub fn channel_mean(&mut self, input: Var) -> Result<Var> {
        let out = kernels::channel_mean(self.value(input))?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::ChannelMean(input), needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(T::zero()));
        let needs = self.needs(&[input]);
        self.push(out, Op::Relu(input), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| T::one() / (T::one() + (-v).exp()));
        let needs = self.needs(&[input]);
        self.push(out, Op::Sigmoid(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Elementwise quotient. The caller keeps the denominator away from zero.
    pub fn div(&mut self, num: Var, den: Var) -> Result<Var> {
        self.same_shape("div", num, den)?;
        let out = self.value(num).zip_map(self.value(den), |x, y| x / y);
        let needs = self.needs(&[num, den]);
        Ok(self.push(out, Op::Div(num, den), needs))
    }

    pub fn broadcast_mul(&mut self, x: Var, gate: Var) -> Result<Var> {
        let out = kernels::broadcast_mul(self.value(x), self.value(gate))?;
        let needs = self.needs(&[x, gate]);
        Ok(self.push(out, Op::BroadcastMul { x, gate }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let needs = self.needs(&[input]);
        self.push(out, Op::Scale(input, factor), needs)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        let needs = self.needs(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), needs))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(input), start, len)?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::SliceChannels { input, start }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::Reshape(input), needs))
    }

    /// Row-major flatten to a rank-1 tensor.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).numel();
        self.reshape(input, &[n])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let needs = self.needs(&[input]);
        self.push(out, Op::Sum(input), needs)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let v = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .sum();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), needs))
    }

    /// Euclidean norm. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, input: Var) -> Var {
        let v = self
            .value(input)
            .data()
            .iter()
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt();
        let needs = self.needs(&[input]);
        self.push(Tensor::scalar(v), Op::Norm(input), needs)
    }

    /// Elementwise `max(x, floor)`; gradient flows only where `x > floor`.
    pub fn max_const(&mut self, input: Var, floor: T) -> Var {
        let out = self.value(input).map(|v| v.max(floor));
        let needs = self.needs(&[input]);
        self.push(out, Op::MaxConst(input, floor), needs)
    }

    /// Reverse pass from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    *spec,
                    g,
                    self.wants(*input),
                )?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *weight, dw);
                self.accumulate(grads, *bias, db);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *input, dx);
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.value(*input).shape();
                let plane = shape[1] * shape[2];
                let n = T::of(plane as f64);
                let mut dx = Tensor::zeros(shape);
                for (chunk, &gv) in dx.data_mut().chunks_mut(plane).zip(g.data()) {
                    chunk.fill(gv / n);
                }
                self.accumulate(grads, *input, dx);
            }
            Op::ChannelMean(input) => {
                let shape = self.value(*input).shape();
                let n = T::of(shape[0] as f64);
                let mut dx = Tensor::zeros(shape);
                for chunk in dx.data_mut().chunks_mut(g.numel()) {
                    for (d, &gv) in chunk.iter_mut().zip(g.data()) {
                        *d = gv / n;
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Relu(input) => {
                let dx = node
                    .value
                    .zip_map(g, |y, gv| if y > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *input, dx);
            }
            Op::Sigmoid(input) => {
                let dx = node.value.zip_map(g, |y, gv| gv * y * (T::one() - y));
                self.accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, y| gv * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, x| gv * x));
                }
            }
            Op::Div(num, den) => {
                let d = self.value(*den);
                if self.wants(*num) {
                    self.accumulate(grads, *num, g.zip_map(d, |gv, y| gv / y));
                }
                if self.wants(*den) {
                    // d(x/y)/dy = -(x/y)/y
                    let q = node.value.zip_map(d, |q, y| q / y);
                    self.accumulate(grads, *den, g.zip_map(&q, |gv, q| -gv * q));
                }
            }
            Op::BroadcastMul { x, gate } => {
                let xv = self.value(*x);
                let gt = self.value(*gate);
                let plane = xv.shape()[1] * xv.shape()[2];
                if self.wants(*x) {
                    self.accumulate(grads, *x, kernels::broadcast_mul(g, gt)?);
                }
                if self.wants(*gate) {
                    let dg = g
                        .data()
                        .chunks(plane)
                        .zip(xv.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gate, Tensor::new(gt.shape(), dg)?);
                }
            }
            Op::Scale(input, factor) => {
                let f = *factor;
                self.accumulate(grads, *input, g.map(|v| v * f));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    if self.wants(p) {
                        self.accumulate(grads, p, kernels::slice_channels(g, start, c)?);
                    }
                    start += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let shape = self.value(*input).shape();
                let plane = shape[1] * shape[2];
                let mut dx = Tensor::zeros(shape);
                dx.data_mut()[start * plane..start * plane + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *input, dx);
            }
            Op::Reshape(input) => {
                let dx = g.clone().reshape(self.value(*input).shape())?;
                self.accumulate(grads, *input, dx);
            }
            Op::Sum(input) => {
                let dx = Tensor::full(self.value(*input).shape(), g.item());
                self.accumulate(grads, *input, dx);
            }
            Op::Dot(a, b) => {
                let gv = g.item();
                if self.wants(*a) {
                    self.accumulate(grads, *a, self.value(*b).map(|v| v * gv));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).map(|v| v * gv));
                }
            }
            Op::Norm(input) => {
                let n = node.value.item();
                let gv = g.item();
                let dx = if n > T::zero() {
                    self.value(*input).map(|v| gv * v / n)
                } else {
                    Tensor::zeros(self.value(*input).shape())
                };
                self.accumulate(grads, *input, dx);
            }
            Op::MaxConst(input, floor) => {
                let f = *floor;
                let dx = self
                    .value(*input)
                    .zip_map(g, |x, gv| if x > f { gv } else { T::zero() });
                self.accumulate(grads, *input, dx);
            }
        }
        Ok(())
    }
}
