//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the list once in reverse. Node inputs always precede the node, so
//! the list is already in topological order.

use rand::Rng;

use crate::autodiff::kernels::{self, Window};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    ScaleBy { scalar: Var, x: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Act(Var, Activation),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Conv2dSame { input: Var, kernel: Var },
    Conv2d { input: Var, weight: Var, bias: Var, win: Window },
    MaxPool { input: Var, argmax: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Dropout { x: Var, mask: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    stochastic: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            stochastic: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once any randomized operation (dropout, stochastic depth) ran with p > 0.
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; `None` when `v` is off the loss path.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.any_grad(inputs);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let c = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.emit(vec![m, n], c, Op::MatMul(a, b), &[a, b]))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let shape = t.shape().to_vec();
        Ok(self.emit(shape, t.into_data(), Op::Transpose(a), &[a]))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.emit(self.shape(a).to_vec(), d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.emit(self.shape(a).to_vec(), d, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.emit(self.shape(a).to_vec(), d, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let d: Vec<T> = self.data(x).iter().enumerate().map(|(i, &v)| v + b[i % n]).collect();
        Ok(self.emit(self.shape(x).to_vec(), d, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let d = self.data(x).iter().map(|&v| v * c).collect();
        self.emit(self.shape(x).to_vec(), d, Op::Scale(x, c), &[x])
    }

    /// Multiply `x` by a one-element variable.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).numel() != 1 {
            return Err(Error::shape("scale_by", self.shape(scalar), &[1]));
        }
        let s = self.data(scalar)[0];
        let d = self.data(x).iter().map(|&v| v * s).collect();
        Ok(self.emit(self.shape(x).to_vec(), d, Op::ScaleBy { scalar, x }, &[scalar, x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.emit(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::lit(v.numel() as f64);
        self.emit(vec![1], vec![s], Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let d = self.data(x).to_vec();
        Ok(self.emit(shape, d, Op::Reshape(x), &[x]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let len = shape[axis];
        let inner = shape[axis + 1..].iter().product();
        let y = kernels::softmax(self.data(x), outer, len, inner);
        Ok(self.emit(shape, y, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Standardize each trailing-dimension vector (population variance), then `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.data(x), d, self.data(gamma), self.data(beta), eps);
        Ok(self.emit(
            shape,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(T) -> T = match kind {
            Activation::Gelu => kernels::gelu,
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Relu => |v: T| v.max(T::zero()),
        };
        let d = self.data(x).iter().map(|&v| f(v)).collect();
        self.emit(self.shape(x).to_vec(), d, Op::Act(x, kind), &[x])
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("cross_entropy", &[b, c], &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Data(format!("label {l} at index {i} out of range for {c} classes")));
        }
        let x = self.data(logits);
        let probs = kernels::softmax(x, b, c, 1);
        let mut loss = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            loss = loss + (lse - row[l]);
        }
        loss = loss / T::lit(b as f64);
        Ok(self.emit(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Shape-preserving single-channel cross-correlation of `input[r×c]` with `kernel[k×k]`.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (r, c) = self.dims2(input, "conv2d_same")?;
        let (k, k2) = self.dims2(kernel, "conv2d_same")?;
        if k != k2 {
            return Err(Error::shape("conv2d_same", self.shape(input), self.shape(kernel)));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel size must be odd, got {k}")));
        }
        if k > 2 * r.min(c) + 1 {
            return Err(Error::shape("conv2d_same", self.shape(input), self.shape(kernel)));
        }
        let out = kernels::conv2d_same(self.data(input), r, c, self.data(kernel), k);
        Ok(self.emit(vec![r, c], out, Op::Conv2dSame { input, kernel }, &[input, kernel]))
    }

    /// Strided multi-channel convolution: `input[C×H×W]`, `weight[O×C×k×k]`, `bias[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let &[in_c, h, w] = self.shape(input) else {
            return Err(Error::shape("conv2d", self.shape(input), &[0, 0, 0]));
        };
        let &[out_c, wc, k, k2] = self.shape(weight) else {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        };
        if wc != in_c || k != k2 || self.shape(bias) != [out_c] {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        let win = Window {
            kernel: k,
            stride,
            padding,
        };
        let (Some(oh), Some(ow)) = (win.out_extent(h), win.out_extent(w)) else {
            return Err(Error::Config(format!(
                "convolution k={k} s={stride} p={padding} collapses a {h}x{w} map"
            )));
        };
        let out = kernels::conv2d(self.data(input), in_c, h, w, self.data(weight), self.data(bias), out_c, win, oh, ow);
        Ok(self.emit(
            vec![out_c, oh, ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            },
            &[input, weight, bias],
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::shape("max_pool2d", self.shape(input), &[0, 0, 0]));
        };
        let win = Window {
            kernel,
            stride,
            padding,
        };
        let (Some(oh), Some(ow)) = (win.out_extent(h), win.out_extent(w)) else {
            return Err(Error::Config(format!("pooling collapses a {h}x{w} map")));
        };
        let (out, argmax) = kernels::max_pool2d(self.data(input), c, h, w, win, oh, ow);
        Ok(self.emit(vec![c, oh, ow], out, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Concatenate rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::Usage("concat needs inputs and axis 0 or 1".into()));
        }
        let (r0, c0) = self.dims2(inputs[0], "concat")?;
        let mut rows = 0;
        let mut cols = 0;
        for &v in inputs {
            let (r, c) = self.dims2(v, "concat")?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::shape("concat", self.shape(inputs[0]), self.shape(v)));
            }
            rows += r;
            cols += c;
        }
        let (rows, cols) = if axis == 0 { (rows, c0) } else { (r0, cols) };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &v in inputs {
                out.extend_from_slice(self.data(v));
            }
        } else {
            for i in 0..r0 {
                for &v in inputs {
                    let c = self.shape(v)[1];
                    out.extend_from_slice(&self.data(v)[i * c..(i + 1) * c]);
                }
            }
        }
        Ok(self.emit(
            vec![rows, cols],
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        self.stochastic = true;
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let d = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.emit(self.shape(x).to_vec(), d, Op::Dropout { x, mask }, &[x])
    }

    /// Stochastic depth on a residual branch: drop the whole branch with
    /// probability `p`, otherwise scale it by `1/(1-p)`.
    pub fn drop_path<R: Rng + ?Sized>(&mut self, branch: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return branch;
        }
        self.stochastic = true;
        let c = if rng.random::<f64>() < p {
            T::zero()
        } else {
            T::lit(1.0 / (1.0 - p))
        };
        self.scale(branch, c)
    }

    /// Reverse sweep from a one-element loss. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape; record a new forward pass".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        // Take an input's gradient buffer, creating it zeroed on first use.
        fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }
        fn accumulate<T: Scalar>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = needs(*a).then(|| vec![T::zero(); m * k]);
                let mut db = needs(*b).then(|| vec![T::zero(); k * n]);
                kernels::matmul_backward(val(*a), val(*b), g, m, k, n, da.as_deref_mut(), db.as_deref_mut());
                if let Some(da) = da {
                    accumulate(slot(grads, nodes, *a), da);
                }
                if let Some(db) = db {
                    accumulate(slot(grads, nodes, *b), db);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let dst = slot(grads, nodes, *a);
                    for x in 0..r {
                        for y in 0..c {
                            dst[x * c + y] = dst[x * c + y] + g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(slot(grads, nodes, *a), g.iter().copied());
                }
                if needs(*b) {
                    accumulate(slot(grads, nodes, *b), g.iter().copied());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(slot(grads, nodes, *a), g.iter().copied());
                }
                if needs(*b) {
                    accumulate(slot(grads, nodes, *b), g.iter().map(|&v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b);
                    accumulate(slot(grads, nodes, *a), g.iter().zip(bv).map(|(&x, &y)| x * y));
                }
                if needs(*b) {
                    let av = val(*a);
                    accumulate(slot(grads, nodes, *b), g.iter().zip(av).map(|(&x, &y)| x * y));
                }
            }
            Op::AddRowBias(x, bias) => {
                if needs(*x) {
                    accumulate(slot(grads, nodes, *x), g.iter().copied());
                }
                if needs(*bias) {
                    let n = self.shape(*bias)[0];
                    let dst = slot(grads, nodes, *bias);
                    for (j, &v) in g.iter().enumerate() {
                        dst[j % n] = dst[j % n] + v;
                    }
                }
            }
            Op::Scale(x, c) => {
                if needs(*x) {
                    accumulate(slot(grads, nodes, *x), g.iter().map(|&v| v * *c));
                }
            }
            Op::ScaleBy { scalar, x } => {
                let s = val(*scalar)[0];
                if needs(*x) {
                    accumulate(slot(grads, nodes, *x), g.iter().map(|&v| v * s));
                }
                if needs(*scalar) {
                    let d: T = g.iter().zip(val(*x)).map(|(&a, &b)| a * b).sum();
                    let dst = slot(grads, nodes, *scalar);
                    dst[0] = dst[0] + d;
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let g0 = g[0];
                    slot(grads, nodes, *x).iter_mut().for_each(|d| *d = *d + g0);
                }
            }
            Op::Mean(x) => {
                if needs(*x) {
                    let g0 = g[0] / T::lit(nodes[x.0].value.numel() as f64);
                    slot(grads, nodes, *x).iter_mut().for_each(|d| *d = *d + g0);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    accumulate(slot(grads, nodes, *x), g.iter().copied());
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if needs(*x) {
                    let y = nodes[i].value.data();
                    kernels::softmax_backward(y, g, *outer, *len, *inner, slot(grads, nodes, *x));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let rows = xhat.len() / d;
                let gm = val(*gamma);
                if needs(*gamma) {
                    let dst = slot(grads, nodes, *gamma);
                    for (j, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dst[j % d] = dst[j % d] + gv * h;
                    }
                }
                if needs(*beta) {
                    let dst = slot(grads, nodes, *beta);
                    for (j, &gv) in g.iter().enumerate() {
                        dst[j % d] = dst[j % d] + gv;
                    }
                }
                if needs(*x) {
                    let dn = T::lit(d as f64);
                    let dst = slot(grads, nodes, *x);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<T> = gr.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                        let sum_dh: T = dh.iter().copied().sum();
                        let sum_dh_h: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            let v = rstd[r] / dn * (dn * dh[j] - sum_dh - hr[j] * sum_dh_h);
                            dst[r * d + j] = dst[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Act(x, kind) => {
                if needs(*x) {
                    let xv = val(*x);
                    let y = nodes[i].value.data();
                    let dst = slot(grads, nodes, *x);
                    for j in 0..g.len() {
                        let d = match kind {
                            Activation::Gelu => kernels::gelu_grad(xv[j]),
                            Activation::Sigmoid => y[j] * (T::one() - y[j]),
                            Activation::Relu => {
                                if xv[j] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        dst[j] = dst[j] + g[j] * d;
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if needs(*logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / T::lit(b as f64);
                    let dst = slot(grads, nodes, *logits);
                    for r in 0..b {
                        for j in 0..c {
                            let onehot = if j == labels[r] { T::one() } else { T::zero() };
                            dst[r * c + j] = dst[r * c + j] + (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Conv2dSame { input, kernel } => {
                let (r, c) = (self.shape(*input)[0], self.shape(*input)[1]);
                let k = self.shape(*kernel)[0];
                let mut di = needs(*input).then(|| vec![T::zero(); r * c]);
                let mut dk = needs(*kernel).then(|| vec![T::zero(); k * k]);
                kernels::conv2d_same_backward(val(*input), r, c, val(*kernel), k, g, di.as_deref_mut(), dk.as_deref_mut());
                if let Some(di) = di {
                    accumulate(slot(grads, nodes, *input), di);
                }
                if let Some(dk) = dk {
                    accumulate(slot(grads, nodes, *kernel), dk);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            } => {
                let &[in_c, h, w] = self.shape(*input) else { unreachable!() };
                let out_c = self.shape(*weight)[0];
                let &[_, oh, ow] = nodes[i].value.shape() else { unreachable!() };
                let mut di = needs(*input).then(|| vec![T::zero(); in_c * h * w]);
                let mut dw = needs(*weight).then(|| vec![T::zero(); nodes[weight.0].value.numel()]);
                let mut db = needs(*bias).then(|| vec![T::zero(); out_c]);
                kernels::conv2d_backward(
                    val(*input),
                    in_c,
                    h,
                    w,
                    val(*weight),
                    out_c,
                    *win,
                    oh,
                    ow,
                    g,
                    di.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(di) = di {
                    accumulate(slot(grads, nodes, *input), di);
                }
                if let Some(dw) = dw {
                    accumulate(slot(grads, nodes, *weight), dw);
                }
                if let Some(db) = db {
                    accumulate(slot(grads, nodes, *bias), db);
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs(*input) {
                    let dst = slot(grads, nodes, *input);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dst[src] = dst[src] + gv;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let total_cols = nodes[i].value.shape()[1];
                let mut row_off = 0;
                let mut col_off = 0;
                for &v in inputs {
                    let (r, c) = (self.shape(v)[0], self.shape(v)[1]);
                    if needs(v) {
                        let dst = slot(grads, nodes, v);
                        for x in 0..r {
                            for y in 0..c {
                                let src = if *axis == 0 {
                                    (row_off + x) * total_cols + y
                                } else {
                                    x * total_cols + col_off + y
                                };
                                dst[x * c + y] = dst[x * c + y] + g[src];
                            }
                        }
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::Dropout { x, mask } => {
                if needs(*x) {
                    accumulate(slot(grads, nodes, *x), g.iter().zip(mask).map(|(&a, &m)| a * m));
                }
            }
        }
    }
}
