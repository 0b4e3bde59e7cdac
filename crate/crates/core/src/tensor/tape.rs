//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Nodes are appended in execution order, so index order is a topological
//! order and `backward` simply walks the record in reverse.

use super::kernels::{gemm, maxpool_forward, Conv2dGeometry, Mat};
use super::Tensor;
use crate::error::{Error, Result};
use crate::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an op defined outside the engine.
///
/// Receives the op's input values, its output value and the upstream
/// gradient; returns one gradient per input (`None` where not needed).
pub trait CustomBackward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var, Real),
    Exp(Var),
    Ln(Var),
    ClampMin(Var, Real),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softplus(Var, Real),
    RowNormalize(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: Conv2dGeometry,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
        floor: Real,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Record of executed tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Overflow-safe `(1/beta) * ln(1 + exp(beta * x))`, floored at the
/// smallest normal float so the result stays strictly positive where
/// `exp(beta * x)` underflows.
pub fn softplus_scalar(x: Real, beta: Real) -> Real {
    (x.max(0.0) + (-(beta * x).abs()).exp().ln_1p() / beta).max(Real::MIN_POSITIVE)
}

pub(crate) fn logistic(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Handles of all recorded nodes in execution order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.all_finite() || !self.inputs_finite(&op),
            "non-finite output from finite inputs"
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &Op) -> bool {
        self.inputs_of(op)
            .iter()
            .all(|v| self.nodes[v.0].value.all_finite())
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Square(a)
            | Op::Sqrt(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a)
            | Op::Softplus(a, _)
            | Op::RowNormalize(a) => vec![*a],
            Op::Conv2d { input, weight, .. } => vec![*input, *weight],
            Op::ChannelBias { input, bias } => vec![*input, *bias],
            Op::MaxPool { input, .. } => vec![*input],
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Nll { probs, .. } => vec![*probs],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(Real, Real) -> Real, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: Real) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise square root; inputs must be nonnegative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.sqrt_stabilized(a, 0.0)
    }

    /// Exact `sqrt(x)` forward whose backward uses `0.5 / sqrt(x + eps)`, so
    /// the gradient stays finite at `x = 0`.
    pub fn sqrt_stabilized(&mut self, a: Var, eps: Real) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Contract(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, Real::sqrt, Op::Sqrt(a, eps)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Real::ln, Op::Ln(a))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: Real) -> Var {
        self.unary(a, |x| x.max(floor), Op::ClampMin(a, floor))
    }

    /// `(1/beta) * ln(1 + exp(beta * x))`, computed without overflow.
    pub fn softplus(&mut self, a: Var, beta: Real) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::Contract(format!("softplus beta must be > 0, got {beta}")));
        }
        Ok(self.unary(a, |x| softplus_scalar(x, beta), Op::Softplus(a, beta)))
    }

    // ---- reductions and views ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as Real);
        let rg = self.rg(a);
        self.push(out, rg, Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Flattens `[N, ...]` to `[N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Divides each row of a positive `[N, C]` tensor by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 2 {
            return Err(Error::shape("row_normalize", format!("expected 2-d, got {:?}", t.shape())));
        }
        let c = t.shape()[1];
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let s: Real = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, rg, Op::RowNormalize(a)))
    }

    // ---- network ops ---------------------------------------------------

    /// Cross-correlation of `[N, C_in, H, W]` with `[C_out, C_in, k, k]`,
    /// zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = Conv2dGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        let data = geom.forward(self.value(input).data(), self.value(weight).data());
        let out = Tensor::new(&geom.output_shape(), data)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(out, rg, Op::Conv2d { input, weight, geom }))
    }

    /// Adds `bias[c]` to every element of channel `c` of `[N, C, ...]`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (t, b) = (self.value(input), self.value(bias));
        if t.ndim() < 2 || b.ndim() != 1 || b.len() != t.shape()[1] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("input {:?}, bias {:?}", t.shape(), b.shape()),
            ));
        }
        let c = t.shape()[1];
        let inner: usize = t.shape()[2..].iter().product();
        let mut data = t.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b.data()[i % c];
            chunk.iter_mut().for_each(|x| *x += bc);
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(out, rg, Op::ChannelBias { input, bias }))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2d", format!("expected 4-d input, got {s:?}")));
        }
        if k == 0 || stride == 0 || k > s[2] || k > s[3] {
            return Err(Error::shape(
                "maxpool2d",
                format!("window {k} (stride {stride}) does not fit input {s:?}"),
            ));
        }
        let (data, argmax, shape) = maxpool_forward(t.data(), s, k, stride);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(input);
        Ok(self.push(out, rg, Op::MaxPool { input, argmax }))
    }

    /// `input · weight + bias` for `[N, D_in] · [D_in, D_out]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
            return Err(Error::shape(
                "affine",
                format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
            ));
        }
        let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut data = vec![0.0; n * dout];
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [dout] {
                return Err(Error::shape(
                    "affine",
                    format!("bias {:?} does not match output width {dout}", bt.shape()),
                ));
            }
            for row in data.chunks_mut(dout) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm(
            Mat::new(x.data(), n, din),
            Mat::new(w.data(), din, dout),
            &mut data,
            1.0,
        );
        let out = Tensor::new(&[n, dout], data)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::Affine { input, weight, bias }))
    }

    /// Mean categorical negative log-likelihood `-(1/N) Σ ln max(p[n, y_n], floor)`.
    pub fn nll(&mut self, probs: Var, labels: &[usize], floor: Real) -> Result<Var> {
        let p = self.value(probs);
        if p.ndim() != 2 || p.shape()[0] != labels.len() {
            return Err(Error::shape(
                "nll",
                format!("probs {:?} vs {} labels", p.shape(), labels.len()),
            ));
        }
        let c = p.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let n = labels.len();
        let total: Real = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p.data()[i * c + y].max(floor).ln())
            .sum();
        let out = Tensor::scalar(if n == 0 { 0.0 } else { total / n as Real });
        let rg = self.rg(probs);
        Ok(self.push(
            out,
            rg,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                floor,
            },
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates `d root / d leaf` into every reachable trainable leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                accumulate(&mut self.nodes[idx].grad, g);
                continue;
            }
            for (input, gi) in self.local_grads(idx, &g) {
                if self.rg(input) {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |t: &Tensor, f: &dyn Fn(Real, Real) -> Real| {
            Tensor::new(
                t.shape(),
                t.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect(),
            )
            .expect("gradient shape")
        };
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    res.push((*a, zip_map(val(*b), &|y, gy| y * gy)));
                }
                if self.rg(*b) {
                    res.push((*b, zip_map(val(*a), &|x, gy| x * gy)));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.map(|x| x * s))),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let mut gi = g.clone();
                gi = gi.reshape(val(*a).shape()).expect("reshape grad");
                res.push((*a, gi));
            }
            Op::Square(a) => res.push((*a, zip_map(val(*a), &|x, gy| 2.0 * x * gy))),
            Op::Sqrt(a, eps) => {
                if *eps == 0.0 {
                    res.push((*a, zip_map(out, &|y, gy| 0.5 * gy / y)))
                } else {
                    res.push((*a, zip_map(val(*a), &|x, gy| 0.5 * gy / (x + eps).sqrt())))
                }
            }
            Op::Exp(a) => res.push((*a, zip_map(out, &|y, gy| y * gy))),
            Op::Ln(a) => res.push((*a, zip_map(val(*a), &|x, gy| gy / x))),
            Op::ClampMin(a, floor) => {
                res.push((*a, zip_map(val(*a), &|x, gy| if x > *floor { gy } else { 0.0 })))
            }
            Op::Softplus(a, beta) => {
                res.push((*a, zip_map(val(*a), &|x, gy| gy * logistic(beta * x))))
            }
            Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Mean(a) => {
                let t = val(*a);
                res.push((*a, Tensor::full(t.shape(), g.item() / t.len() as Real)));
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let c = x.shape()[1];
                let mut gi = vec![0.0; x.len()];
                for ((xr, pr), (gr, dst)) in x
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c).zip(gi.chunks_mut(c)))
                {
                    let s: Real = xr.iter().sum();
                    let dot: Real = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (d, gy) in dst.iter_mut().zip(gr) {
                        *d = (gy - dot) / s;
                    }
                }
                res.push((*a, Tensor::new(x.shape(), gi).expect("shape")));
            }
            Op::Conv2d {
                input,
                weight,
                geom,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let mut gx = self.rg(*input).then(|| vec![0.0; x.len()]);
                let mut gw = self.rg(*weight).then(|| vec![0.0; w.len()]);
                geom.backward(x.data(), w.data(), g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                if let Some(gx) = gx {
                    res.push((*input, Tensor::new(x.shape(), gx).expect("shape")));
                }
                if let Some(gw) = gw {
                    res.push((*weight, Tensor::new(w.shape(), gw).expect("shape")));
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.rg(*input) {
                    res.push((*input, g.clone()));
                }
                if self.rg(*bias) {
                    let s = g.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().sum::<Real>();
                    }
                    res.push((*bias, Tensor::new(&[c], gb).expect("shape")));
                }
            }
            Op::MaxPool { input, argmax } => {
                let x = val(*input);
                let mut gi = vec![0.0; x.len()];
                for (&src, gy) in argmax.iter().zip(g.data()) {
                    gi[src] += gy;
                }
                res.push((*input, Tensor::new(x.shape(), gi).expect("shape")));
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, din, dout) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let gm = Mat::new(g.data(), n, dout);
                if self.rg(*input) {
                    let mut gx = vec![0.0; n * din];
                    gemm(gm, Mat::new(w.data(), din, dout).t(), &mut gx, 0.0);
                    res.push((*input, Tensor::new(x.shape(), gx).expect("shape")));
                }
                if self.rg(*weight) {
                    let mut gw = vec![0.0; din * dout];
                    gemm(Mat::new(x.data(), n, din).t(), gm, &mut gw, 0.0);
                    res.push((*weight, Tensor::new(w.shape(), gw).expect("shape")));
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let mut gb = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    res.push((b, Tensor::new(&[dout], gb).expect("shape")));
                }
            }
            Op::Nll {
                probs,
                labels,
                floor,
            } => {
                let p = val(*probs);
                let c = p.shape()[1];
                let n = labels.len() as Real;
                let mut gi = vec![0.0; p.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let pv = p.data()[i * c + y];
                    if pv > *floor {
                        gi[i * c + y] = -g.item() / (n * pv);
                    }
                }
                res.push((*probs, Tensor::new(p.shape(), gi).expect("shape")));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gi) in inputs.iter().zip(rule.backward(&ins, out, g)) {
                    if let Some(gi) = gi {
                        res.push((*v, gi));
                    }
                }
            }
        }
        res
    }
}
