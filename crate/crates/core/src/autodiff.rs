//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; inputs always precede
//! outputs, so walking the node list backwards is a reverse topological order.
//! Binary elementwise ops accept operands of identical shape, or one operand of
//! scalar shape `[]`. There is no other broadcasting.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::tensor::{axis_split, numel, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with statistics of the current input.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the form folded into running estimates.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, T, T),
    Softmax(Var, usize),
    MeanAxis(Var, usize),
    Sum(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Gather(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    last_visits: Vec<Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.is_empty()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reduces a gradient to the shape of a (possibly scalar) operand.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        g
    } else {
        Tensor::scalar(g.sum())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            last_visits: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.leaf_grads[v.0].take()
    }

    /// Nodes processed by the most recent backward pass, in processing order.
    pub fn last_backward_visits(&self) -> &[Var] {
        &self.last_visits
    }

    /// Hash of every piecewise branch taken so far: ReLU and clamp regions and
    /// pooling winners. Two forward passes with equal signatures evaluated the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        (x > T::ZERO).hash(&mut h);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for &x in self.value(*a).data() {
                        ((x < *lo) as u8 + 2 * (x > *hi) as u8).hash(&mut h);
                    }
                }
                Op::Gather(_, idx) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        kernels::gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, true);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Cross-correlation of `[C_in, spatial..]` with `[C_out, C_in, k..]` plus bias.
    pub fn conv(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape("conv bias", self.shape(b), &[geom.c_out]));
            }
        }
        let out_n = geom.out_positions();
        let kdim = geom.c_in * geom.kernel_volume();
        let mut out = vec![T::ZERO; geom.c_out * out_n];
        if let Some(b) = bias {
            for (row, &bv) in out.chunks_mut(out_n).zip(self.value(b).data()) {
                row.fill(bv);
            }
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        if geom.is_pointwise() {
            kernels::gemm_nn(w, x, &mut out, geom.c_out, kdim, out_n, true);
        } else {
            let cols = geom.im2col(x);
            kernels::gemm_nn(w, &cols, &mut out, geom.c_out, kdim, out_n, true);
        }
        let value = Tensor::new(geom.output_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            },
            &inputs,
        ))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            va.zip_map(vb, f)
        } else if is_scalar_shape(vb.shape()) {
            let s = vb.item();
            Ok(va.map(|x| f(x, s)))
        } else if is_scalar_shape(va.shape()) {
            let s = va.item();
            Ok(vb.map(|y| f(s, y)))
        } else {
            Err(Error::shape(op, va.shape(), vb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(value, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::Shift(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::ZERO { x } else { T::ZERO });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        self.push(value, Op::Log(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where no clamping happened.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(value, Op::Clamp(a, lo, hi), &[a])
    }

    // ---- reductions and normalization --------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let src = x.data();
        let mut out = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = src[at(0)];
                for k in 1..len {
                    max = max.max(src[at(k)]);
                }
                let mut total = T::ZERO;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Softmax(a, axis), &[a]))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::invalid("mean", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = vec![T::ZERO; outer * inner];
        let src = x.data();
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        let denom = T::from_f64(len as f64);
        out.iter_mut().for_each(|v| *v /= denom);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MeanAxis(a, axis), &[a]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    /// Batch normalization of `[C, spatial..]` with per-channel statistics over
    /// all non-channel elements. In training mode the observed statistics are
    /// returned so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor<T>, &Tensor<T>),
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid("batch_norm", format!("expected [C, spatial..], got {xs:?}")));
        }
        let c = xs[0];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::InvalidArgument {
                    op: "batch_norm",
                    msg: format!("{name} shape {:?} does not match {c} channels", self.shape(v)),
                });
            }
        }
        if running.0.shape() != [c] || running.1.shape() != [c] {
            return Err(Error::shape("batch_norm running stats", running.0.shape(), &[c]));
        }
        let m = numel(&xs[1..]);
        let eps = T::from_f64(BN_EPS);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::ZERO; src.len()];
        let mut out = vec![T::ZERO; src.len()];
        let mut inv_std = vec![T::ZERO; c];
        let training = mode == NormMode::Train;
        let mut stats = BatchStats {
            mean: vec![T::ZERO; c],
            var: vec![T::ZERO; c],
        };
        let mf = T::from_f64(m as f64);
        for ch in 0..c {
            let plane = &src[ch * m..(ch + 1) * m];
            let (mean, var) = if training {
                let mean = plane.iter().copied().sum::<T>() / mf;
                let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                stats.mean[ch] = mean;
                stats.var[ch] = if m > 1 {
                    var * mf / T::from_f64((m - 1) as f64)
                } else {
                    var
                };
                (mean, var)
            } else {
                (running.0.data()[ch], running.1.data()[ch])
            };
            let istd = T::ONE / (var + eps).sqrt();
            inv_std[ch] = istd;
            for i in 0..m {
                let xh = (plane[i] - mean) * istd;
                xhat[ch * m + i] = xh;
                out[ch * m + i] = g[ch] * xh + b[ch];
            }
        }
        let value = Tensor::new(xs, out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        );
        Ok((var, training.then_some(stats)))
    }

    // ---- layout ------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == base[i]);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Narrow(a, axis, start), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn max_pool(&mut self, a: Var, window: &[usize]) -> Result<Var> {
        let (values, argmax, shape) = kernels::max_pool(self.value(a).data(), self.shape(a), window)?;
        let value = Tensor::new(shape, values)?;
        Ok(self.push(value, Op::Gather(a, argmax), &[a]))
    }

    pub fn upsample_nearest(&mut self, a: Var, factors: &[usize]) -> Result<Var> {
        let (values, source, shape) = kernels::upsample_nearest(self.value(a).data(), self.shape(a), factors)?;
        let value = Tensor::new(shape, values)?;
        Ok(self.push(value, Op::Gather(a, source), &[a]))
    }

    // ---- backward ----------------------------------------------------------

    /// Backpropagates from a scalar `loss`, adding into the gradients of every
    /// `requires_grad` leaf it reaches. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.shape(loss).to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        self.last_visits.clear();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&loss_shape, T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.last_visits.push(Var(idx));
            if let Op::Leaf = node.op {
                accumulate(&mut self.leaf_grads[idx], g);
                continue;
            }
            for (input, contribution) in self.vjp(idx, g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], contribution);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian product of node `idx` for output gradient `g`.
    fn vjp(&self, idx: usize, g: Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    kernels::gemm_nt(g.data(), val(*b).data(), &mut da, m, n, k);
                    out.push((*a, Tensor::new(sa.to_vec(), da)?));
                }
                if needs(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    kernels::gemm_tn(val(*a).data(), g.data(), &mut db, k, m, n);
                    out.push((*b, Tensor::new(sb.to_vec(), db)?));
                }
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let out_n = geom.out_positions();
                let kdim = geom.c_in * geom.kernel_volume();
                let x = val(*input).data();
                let pointwise = geom.is_pointwise();
                let cols_owned;
                let cols: &[T] = if pointwise {
                    x
                } else {
                    cols_owned = geom.im2col(x);
                    &cols_owned
                };
                if needs(*kernel) {
                    let mut dw = vec![T::ZERO; geom.c_out * kdim];
                    kernels::gemm_nt(g.data(), cols, &mut dw, geom.c_out, out_n, kdim);
                    out.push((*kernel, Tensor::new(val(*kernel).shape().to_vec(), dw)?));
                }
                if needs(*input) {
                    let mut dcols = vec![T::ZERO; kdim * out_n];
                    kernels::gemm_tn(val(*kernel).data(), g.data(), &mut dcols, kdim, geom.c_out, out_n);
                    let dx = if pointwise {
                        dcols
                    } else {
                        let mut dx = vec![T::ZERO; x.len()];
                        geom.col2im(&dcols, &mut dx);
                        dx
                    };
                    out.push((*input, Tensor::new(val(*input).shape().to_vec(), dx)?));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let db: Vec<T> = g.data().chunks(out_n).map(|row| row.iter().copied().sum()).collect();
                        out.push((*b, Tensor::new(vec![geom.c_out], db)?));
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    out.push((*a, reduce_to(g.clone(), val(*a).shape())));
                }
                if needs(*b) {
                    out.push((*b, reduce_to(g, val(*b).shape())));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    out.push((*a, reduce_to(g.clone(), val(*a).shape())));
                }
                if needs(*b) {
                    out.push((*b, reduce_to(g.map(|v| -v), val(*b).shape())));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    out.push((*a, reduce_to(mul_bcast(&g, vb), va.shape())));
                }
                if needs(*b) {
                    out.push((*b, reduce_to(mul_bcast(&g, va), vb.shape())));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let inv = vb.map(|y| T::ONE / y);
                    out.push((*a, reduce_to(mul_bcast(&g, &inv), va.shape())));
                }
                if needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let ratio = &node.value;
                    let inv = vb.map(|y| T::ONE / y);
                    let t = mul_bcast(&mul_bcast(&g, ratio), &inv).map(|v| -v);
                    out.push((*b, reduce_to(t, vb.shape())));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                out.push((*a, g.map(|v| v * s)));
            }
            Op::Shift(a) => out.push((*a, g)),
            Op::Relu(a) => {
                out.push((*a, g.zip_map(val(*a), |gv, x| if x > T::ZERO { gv } else { T::ZERO })?));
            }
            Op::Sigmoid(a) => {
                out.push((*a, g.zip_map(&node.value, |gv, y| gv * y * (T::ONE - y))?));
            }
            Op::Log(a) => {
                out.push((*a, g.zip_map(val(*a), |gv, x| gv / x)?));
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                out.push((*a, g.zip_map(val(*a), |gv, x| if x >= lo && x <= hi { gv } else { T::ZERO })?));
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let gd = g.data();
                let mut dx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                out.push((*a, Tensor::new(node.value.shape().to_vec(), dx)?));
            }
            Op::MeanAxis(a, axis) => {
                let shape = val(*a).shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let scale = T::ONE / T::from_f64(len as f64);
                let gd = g.data();
                let mut dx = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            dx[(o * len + k) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                out.push((*a, Tensor::new(shape.to_vec(), dx)?));
            }
            Op::Sum(a) => {
                out.push((*a, Tensor::full(val(*a).shape(), g.item())));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            dp.extend_from_slice(&g.data()[from..from + len * inner]);
                        }
                        out.push((p, Tensor::new(val(p).shape().to_vec(), dp)?));
                    }
                    offset += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let shape = val(*a).shape();
                let (outer, full, inner) = axis_split(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::ZERO; outer * full * inner];
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*a, Tensor::new(shape.to_vec(), dx)?));
            }
            Op::Reshape(a) => {
                out.push((*a, g.reshape(val(*a).shape())?));
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![T::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g.data()[i * c + j];
                    }
                }
                out.push((*a, Tensor::new(vec![c, r], dx)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = val(*x).shape();
                let c = shape[0];
                let m = numel(&shape[1..]);
                let gd = g.data();
                let gam = val(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; gd.len()];
                let mf = T::from_f64(m as f64);
                for ch in 0..c {
                    let r = ch * m..(ch + 1) * m;
                    let (gs, xs) = (&gd[r.clone()], &xhat[r.clone()]);
                    let sum_g: T = gs.iter().copied().sum();
                    let sum_gx: T = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum();
                    dgamma[ch] = sum_gx;
                    dbeta[ch] = sum_g;
                    let k = gam[ch] * inv_std[ch];
                    for i in 0..m {
                        dx[ch * m + i] = if *training {
                            k * (gs[i] - sum_g / mf - xs[i] * sum_gx / mf)
                        } else {
                            k * gs[i]
                        };
                    }
                }
                if needs(*x) {
                    out.push((*x, Tensor::new(shape.to_vec(), dx)?));
                }
                if needs(*gamma) {
                    out.push((*gamma, Tensor::new(vec![c], dgamma)?));
                }
                if needs(*beta) {
                    out.push((*beta, Tensor::new(vec![c], dbeta)?));
                }
            }
            Op::Gather(a, source) => {
                let shape = val(*a).shape();
                let mut dx = vec![T::ZERO; numel(shape)];
                for (&src, &gv) in source.iter().zip(g.data()) {
                    dx[src] += gv;
                }
                out.push((*a, Tensor::new(shape.to_vec(), dx)?));
            }
        }
        Ok(out)
    }
}

fn mul_bcast<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if g.shape() == other.shape() {
        g.zip_map(other, |a, b| a * b).expect("shapes checked")
    } else if other.shape().is_empty() {
        let s = other.item();
        g.map(|a| a * s)
    } else {
        // g is the scalar output of a scalar⊙scalar op broadcast against `other`
        let s = g.item();
        other.map(|b| b * s)
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Folds observed batch statistics into running estimates with `momentum`.
pub fn update_running<T: Scalar>(running_mean: &mut Tensor<T>, running_var: &mut Tensor<T>, stats: &BatchStats<T>, momentum: f64) {
    let m = T::from_f64(momentum);
    for (r, &s) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = (T::ONE - m) * *r + m * s;
    }
    for (r, &s) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = (T::ONE - m) * *r + m * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, c).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn matmul_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn conv_ones_same_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv(x, k, None, 1, Padding::Same).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 4, 4]);
        assert_eq!(v.at(&[0, 1, 1]), 9.0);
        assert_eq!(v.at(&[0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 3, 3]), 4.0);
        assert_eq!(v.at(&[0, 0, 1]), 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 5).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.constant(t(&[1, 2, 3, 5], &data));
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv(x, k, Some(b), 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_stride_shrinks_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 6, 6]));
        let k = tape.constant(Tensor::ones(&[2, 1, 3, 3]));
        let y = tape.conv(x, k, None, 2, Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3]);
        let y = tape.conv(x, k, None, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
        let m = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let mean = tape.mean_axis(m, 0).unwrap();
        assert_eq!(tape.value(mean).data(), &[3.0, 5.0]);
        assert_eq!(tape.shape(mean), &[2]);
    }

    #[test]
    fn binary_ops_reject_non_scalar_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let s = tape.constant(Tensor::scalar(2.0));
        assert!(tape.mul(a, s).is_ok());
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::new();
        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::ones(&[1]);
        let gamma = tape.constant(Tensor::ones(&[1]));
        let beta = tape.constant(t(&[1], &[0.25]));
        let x = tape.constant(Tensor::full(&[1, 3, 3], 4.0));
        let (y, stats) = tape.batch_norm(x, gamma, beta, (&rm, &rv), NormMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        assert_eq!(stats.unwrap().mean, vec![4.0]);

        let beta0 = tape.constant(Tensor::zeros(&[1]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let (y, _) = tape.batch_norm(x, gamma, beta0, (&rm, &rv), NormMode::Train).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

        let (y, stats) = tape.batch_norm(x, gamma, beta0, (&rm, &rv), NormMode::Eval).unwrap();
        assert!(stats.is_none());
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-4);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rm = Tensor::<f64>::zeros(&[1]);
        let mut rv = Tensor::<f64>::ones(&[1]);
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![3.0],
        };
        update_running(&mut rm, &mut rv, &stats, 0.1);
        assert!((rm.item() - 0.2).abs() < 1e-12);
        assert!((rv.item() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_visits_each_reachable_node_once_in_reverse_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let a = tape.mul(x, c).unwrap();
        let b = tape.add(a, x).unwrap();
        let d = tape.mul(b, a).unwrap();
        let s = tape.sum(d);
        tape.backward(s).unwrap();
        let visits = tape.last_backward_visits();
        assert_eq!(visits, &[s, d, b, a, x]);
    }

    #[test]
    fn concat_then_narrow_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 3, 2], &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 4, 2]);
        let a2 = tape.narrow(c, 1, 0, 1).unwrap();
        let b2 = tape.narrow(c, 1, 1, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }
}
