//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every op appends one node; `backward` walks the nodes from the loss back to
//! the first entry. Nodes that do not depend on any `requires_grad` leaf are
//! skipped, so a detached value (a fresh non-differentiable leaf) cuts every
//! gradient path through it.

use super::tensor::{log_softmax_into, softmax_in_place};
use super::{Scalar, Tensor, Variable};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub pad: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    CenterCols(Var),
    Scale(Var, T),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
    },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        eps: T,
    },
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    SoftCrossEntropy {
        logits: Var,
        target: Tensor<T>,
        temperature: T,
    },
    Sum(Var),
    Mean(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::CenterCols(_) => "center_cols",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2(_) => "avg_pool2",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize_rows",
            Op::RowDot(..) => "row_dot",
            Op::ConcatCols(..) => "concat_cols",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward traversal.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, or `None` when no
    /// differentiable path connects them.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zero-filled when disconnected.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Adds the gradient of `var` into `variable.grad` if it requires one.
    pub fn accumulate(&self, var: Var, variable: &mut Variable<T>) -> Result<()> {
        if !variable.requires_grad {
            return Ok(());
        }
        if let Some(g) = self.get(var) {
            variable.grad.axpy(T::one(), g)?;
        }
        Ok(())
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_passes: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many times `backward` has run on this tape.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter, honouring its `requires_grad` flag.
    pub fn watch(&mut self, variable: &Variable<T>) -> Var {
        self.leaf(variable.value.clone(), variable.requires_grad)
    }

    /// Copies the value into a fresh leaf that carries no gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` bias to every row of an `n×d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.numel() != d {
            return Err(Error::shape("add_bias", self.value(x).shape(), b.shape()));
        }
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (v, &bj) in row.iter_mut().zip(b.data()) {
                *v += bj;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Subtracts each column's mean over the rows of an `n×d` matrix.
    pub fn center_cols(&mut self, x: Var) -> Result<Var> {
        let value = center_columns(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::CenterCols(x), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stride-1 2-D convolution with zero padding.
    /// `input`: N×C×H×W, `weight`: O×C×K×K, `bias`: O.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, geom: Conv2dGeometry) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let conv = ConvShape::infer(x.shape(), w.shape(), geom.pad)?;
        if b.numel() != conv.out_c {
            return Err(Error::shape("conv2d bias", w.shape(), b.shape()));
        }
        let mut out = vec![T::zero(); conv.n * conv.out_c * conv.out_hw()];
        let mut cols = vec![T::zero(); conv.col_rows() * conv.out_hw()];
        let in_len = conv.c * conv.h * conv.w;
        let out_len = conv.out_c * conv.out_hw();
        for img in 0..conv.n {
            conv.im2col(&x.data()[img * in_len..(img + 1) * in_len], &mut cols);
            let o = &mut out[img * out_len..(img + 1) * out_len];
            for (oc, chunk) in o.chunks_mut(conv.out_hw()).enumerate() {
                chunk.fill(b.data()[oc]);
            }
            T::gemm(
                conv.out_c,
                conv.col_rows(),
                conv.out_hw(),
                T::one(),
                w.data(),
                (conv.col_rows() as isize, 1),
                &cols,
                (conv.out_hw() as isize, 1),
                T::one(),
                o,
                (conv.out_hw() as isize, 1),
            );
        }
        let value = Tensor::new(&[conv.n, conv.out_c, conv.out_h, conv.out_w], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad: geom.pad,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "avg_pool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("avg_pool2", self.value(x).shape(), &[2, 2]));
        }
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = 2 * i * w + 2 * j;
                    o[i * ow + j] = (s[r0] + s[r0 + 1] + s[r0 + w] + s[r0 + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), rg))
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x), "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).expect("spatial size");
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let value = self.value(x).l2_normalize_rows(eps)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, eps }, rg))
    }

    /// Per-row inner product of two n×d matrices, as an n×1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, d) = va.dims2()?;
        if va.shape() != vb.shape() {
            return Err(Error::shape("row_dot", va.shape(), vb.shape()));
        }
        let data = (0..n)
            .map(|i| {
                va.data()[i * d..(i + 1) * d]
                    .iter()
                    .zip(&vb.data()[i * d..(i + 1) * d])
                    .map(|(&x, &y)| x * y)
                    .sum()
            })
            .collect();
        let value = Tensor::new(&[n, 1], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::RowDot(a, b), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ca) = va.dims2()?;
        let (n2, cb) = vb.dims2()?;
        if n != n2 {
            return Err(Error::shape("concat_cols", va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let value = Tensor::new(&[n, ca + cb], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    /// Mean over rows of `−Σ_j target[i,j] · log softmax(logits[i]/τ)[j]`.
    /// The target is a plain tensor and never receives a gradient.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: &Tensor<T>, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::param(
                "temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        let l = self.value(logits);
        let (n, q) = l.dims2()?;
        if l.shape() != target.shape() {
            return Err(Error::shape("soft_cross_entropy", l.shape(), target.shape()));
        }
        let mut logp = vec![T::zero(); q];
        let mut total = T::zero();
        for i in 0..n {
            log_softmax_into(l.row(i), temperature, &mut logp);
            total -= target.row(i).iter().zip(&logp).map(|(&t, &lp)| t * lp).sum::<T>();
        }
        let value = Tensor::scalar(total / T::from_usize(n).expect("batch size"));
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            value,
            Op::SoftCrossEntropy {
                logits,
                target: target.clone(),
                temperature,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::from_usize(v.numel()).expect("numel"));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Populates gradients of the scalar `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_passes += 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited.push(idx);
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Var, delta: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.axpy(T::one(), &delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2()?;
                let (_, n) = vb.dims2()?;
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), vb.data(), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
                    send(*a, Tensor::new(&[m, k], da)?)?;
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), va.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
                    send(*b, Tensor::new(&[k, n], db)?)?;
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::AddBias(x, bias) => {
                send(*x, g.clone())?;
                if self.requires_grad(*bias) {
                    let (_, d) = g.dims2()?;
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*bias, Tensor::new(self.value(*bias).shape(), db)?)?;
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let dx = g.zip_map(out, |gv, o| if o > T::zero() { gv } else { T::zero() })?;
                send(*x, dx)?;
            }
            Op::CenterCols(x) => send(*x, center_columns(g)?)?,
            Op::Scale(x, factor) => send(*x, g.map(|v| v * *factor))?,
            Op::Reshape(x) => send(*x, g.clone().reshape(self.value(*x).shape())?)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            } => self.conv2d_backward(g, *input, *weight, *bias, *pad, &mut send)?,
            Op::AvgPool2(x) => {
                let (n, c, h, w) = dims4(self.value(*x), "avg_pool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gp = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = gp[i * ow + j] * quarter;
                            let r0 = 2 * i * w + 2 * j;
                            d[r0] = v;
                            d[r0 + 1] = v;
                            d[r0 + w] = v;
                            d[r0 + w + 1] = v;
                        }
                    }
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(self.value(*x), "global_avg_pool")?;
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).expect("spatial size");
                let mut dx = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                send(*x, Tensor::new(self.value(*x).shape(), dx)?)?;
            }
            Op::L2Normalize { x, eps } => {
                let vx = self.value(*x);
                let (_, d) = vx.dims2()?;
                let mut dx = vec![T::zero(); vx.numel()];
                for (i, out) in dx.chunks_mut(d).enumerate() {
                    let xr = vx.row(i);
                    let yr = node.value.row(i);
                    let gr = g.row(i);
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > *eps {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for j in 0..d {
                            out[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..d {
                            out[j] = gr[j] / *eps;
                        }
                    }
                }
                send(*x, Tensor::new(vx.shape(), dx)?)?;
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (_, d) = va.dims2()?;
                let scale_rows = |src: &Tensor<T>| -> Result<Tensor<T>> {
                    let mut out = src.clone();
                    for (row, &gv) in out.data_mut().chunks_mut(d).zip(g.data()) {
                        row.iter_mut().for_each(|v| *v *= gv);
                    }
                    Ok(out)
                };
                if self.requires_grad(*a) {
                    send(*a, scale_rows(vb)?)?;
                }
                if self.requires_grad(*b) {
                    send(*b, scale_rows(va)?)?;
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.value(*a).dims2()?;
                let (_, cb) = self.value(*b).dims2()?;
                let mut da = Vec::with_capacity(n * ca);
                let mut db = Vec::with_capacity(n * cb);
                for i in 0..n {
                    let row = g.row(i);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(*a, Tensor::new(&[n, ca], da)?)?;
                send(*b, Tensor::new(&[n, cb], db)?)?;
            }
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
            } => {
                let l = self.value(*logits);
                let (n, q) = l.dims2()?;
                let coef = g.item() / (*temperature * T::from_usize(n).expect("batch size"));
                let mut dl = l.data().to_vec();
                for (i, row) in dl.chunks_mut(q).enumerate() {
                    softmax_in_place(row, *temperature);
                    let t = target.row(i);
                    let mass: T = t.iter().copied().sum();
                    for j in 0..q {
                        row[j] = coef * (row[j] * mass - t[j]);
                    }
                }
                send(*logits, Tensor::new(&[n, q], dl)?)?;
            }
            Op::Sum(x) => send(*x, Tensor::full(self.value(*x).shape(), g.item()))?,
            Op::Mean(x) => {
                let v = self.value(*x);
                let each = g.item() / T::from_usize(v.numel()).expect("numel");
                send(*x, Tensor::full(v.shape(), each))?;
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        input: Var,
        weight: Var,
        bias: Var,
        pad: usize,
        send: &mut impl FnMut(Var, Tensor<T>) -> Result<()>,
    ) -> Result<()> {
        let x = self.value(input);
        let w = self.value(weight);
        let conv = ConvShape::infer(x.shape(), w.shape(), pad)?;
        let (rows, hw) = (conv.col_rows(), conv.out_hw());
        let in_len = conv.c * conv.h * conv.w;
        let out_len = conv.out_c * hw;
        let need_x = self.requires_grad(input);
        let need_w = self.requires_grad(weight);

        let mut dw = vec![T::zero(); w.numel()];
        let mut db = vec![T::zero(); conv.out_c];
        let mut dx = vec![T::zero(); if need_x { x.numel() } else { 0 }];
        let mut cols = vec![T::zero(); rows * hw];
        let mut dcols = vec![T::zero(); rows * hw];
        for img in 0..conv.n {
            let gi = &g.data()[img * out_len..(img + 1) * out_len];
            for (oc, chunk) in gi.chunks(hw).enumerate() {
                db[oc] += chunk.iter().copied().sum::<T>();
            }
            if need_w {
                conv.im2col(&x.data()[img * in_len..(img + 1) * in_len], &mut cols);
                // dW += G_img · colsᵀ
                T::gemm(conv.out_c, hw, rows, T::one(), gi, (hw as isize, 1), &cols, (1, hw as isize), T::one(), &mut dw, (rows as isize, 1));
            }
            if need_x {
                // dcols = Wᵀ · G_img
                T::gemm(rows, conv.out_c, hw, T::one(), w.data(), (1, rows as isize), gi, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
                conv.col2im(&dcols, &mut dx[img * in_len..(img + 1) * in_len]);
            }
        }
        if need_x {
            send(input, Tensor::new(x.shape(), dx)?)?;
        }
        if need_w {
            send(weight, Tensor::new(w.shape(), dw)?)?;
        }
        if self.requires_grad(bias) {
            send(bias, Tensor::new(self.value(bias).shape(), db)?)?;
        }
        Ok(())
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape()[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, t.shape(), &[0, 0, 0, 0])),
    }
}

struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvShape {
    fn infer(x: &[usize], w: &[usize], pad: usize) -> Result<Self> {
        let (&[n, c, h, wd], &[oc, wc, kh, kw]) = (x, w) else {
            return Err(Error::shape("conv2d", x, w));
        };
        if c != wc || kh != kw || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d", x, w));
        }
        Ok(ConvShape {
            n,
            c,
            h,
            w: wd,
            out_c: oc,
            k: kh,
            pad,
            out_h: h + 2 * pad - kh + 1,
            out_w: wd + 2 * pad - kw + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Visits every (column-matrix offset, image offset) pair that lies inside
    /// the unpadded image.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let hw = self.out_hw();
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    for oh in 0..self.out_h {
                        let ih = oh + ki;
                        if ih < self.pad || ih - self.pad >= self.h {
                            continue;
                        }
                        let ih = ih - self.pad;
                        for ow in 0..self.out_w {
                            let iw = ow + kj;
                            if iw < self.pad || iw - self.pad >= self.w {
                                continue;
                            }
                            f(row * hw + oh * self.out_w + ow, (ch * self.h + ih) * self.w + iw - self.pad);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        self.for_each_tap(|ci, xi| cols[ci] = img[xi]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        self.for_each_tap(|ci, xi| img[xi] += cols[ci]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]), true);
        let s = tape.sum(x);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn center_cols_value_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 4., 3., 0.]), true);
        let y = tape.center_cols(x).unwrap();
        assert_eq!(tape.value(y).data(), &[-1., 2., 1., -2.]);
        // A plain sum is invariant to centering, so its gradient vanishes.
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.0));

        let target = t(&[3, 2], &[0.2, 0.8, 0.5, 0.5, 0.9, 0.1]);
        let x0 = t(&[3, 2], &[0.3, -1.2, 0.8, 0.1, -0.4, 0.6]);
        let err = super::super::grad_check(
            |tape, v| {
                let y = tape.center_cols(v[0])?;
                tape.soft_cross_entropy(y, &target, 0.5)
            },
            &[x0],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detach_blocks_upstream() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1., 2.]), true);
        let y = tape.scale(x, 3.0);
        let d = tape.detach(y);
        let z = tape.relu(d);
        let s = tape.sum(z);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert!(!tape.requires_grad(d));
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1., 2.]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_visits_in_reverse_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), true);
        let a = tape.relu(x);
        let b = tape.scale(a, 2.0);
        let c = tape.matmul(b, x).unwrap();
        let s = tape.mean(c);
        let grads = tape.backward(s).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(order, &[s.index(), c.index(), b.index(), a.index(), x.index()]);
        assert_eq!(tape.backward_passes(), 1);
    }

    #[test]
    fn soft_ce_uniform_is_ln2() {
        let mut tape = Tape::new();
        let l = tape.leaf(t(&[1, 2], &[0.3, 0.3]), true);
        let target = t(&[1, 2], &[0.5, 0.5]);
        let ce = tape.soft_cross_entropy(l, &target, 0.1).unwrap();
        assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn watch_respects_requires_grad() {
        let frozen = Variable::new(t(&[1, 2], &[1., 2.]), false);
        let mut tape = Tape::new();
        let v = tape.watch(&frozen);
        let s = tape.sum(v);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(v).is_none());
    }
}

fn center_columns<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    let mut out = x.clone();
    if n == 0 {
        return Ok(out);
    }
    let mut mean = vec![T::zero(); d];
    for row in x.data().chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = T::one() / T::of(n as f64);
    for row in out.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= *m * inv;
        }
    }
    Ok(out)
}
