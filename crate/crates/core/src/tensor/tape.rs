use super::kernels::{self, ConvGeom};
use super::{numel, Element, Tensor};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        // Geometry of the forward convolution this op is the adjoint of:
        // its input is our output and its output is our input.
        geom: ConvGeom,
        batch: usize,
        in_channels: usize,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op,
    requires_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for [`Graph::backward`]. A graph is built for one
/// forward pass and dropped afterwards; calling `backward` again recomputes
/// every gradient from scratch rather than accumulating onto the previous
/// result.
#[derive(Debug, Clone, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn channel_major<T: Element>(batch: usize, channels: usize, plane: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for c in 0..channels {
            let s = &src[(n * channels + c) * plane..(n * channels + c + 1) * plane];
            out[c * batch * plane + n * plane..c * batch * plane + (n + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

fn batch_major<T: Element>(batch: usize, channels: usize, plane: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for c in 0..channels {
            let s = &src[c * batch * plane + n * plane..c * batch * plane + (n + 1) * plane];
            out[(n * channels + c) * plane..(n * channels + c + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

/// Unfolds every image of a batch into one `rows × (batch·cols)` matrix.
fn im2col_batch<T: Element>(g: &ConvGeom, batch: usize, images: &[T]) -> Vec<T> {
    let img_len = g.channels * g.h * g.w;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut per = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); rows * cols * batch];
    for n in 0..batch {
        kernels::im2col(g, &images[n * img_len..(n + 1) * img_len], &mut per);
        for r in 0..rows {
            let dst = r * cols * batch + n * cols;
            out[dst..dst + cols].copy_from_slice(&per[r * cols..(r + 1) * cols]);
        }
    }
    out
}

/// Adjoint of [`im2col_batch`].
fn col2im_batch<T: Element>(g: &ConvGeom, batch: usize, col: &[T]) -> Vec<T> {
    let img_len = g.channels * g.h * g.w;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut per = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); img_len * batch];
    for n in 0..batch {
        for r in 0..rows {
            let src = r * cols * batch + n * cols;
            per[r * cols..(r + 1) * cols].copy_from_slice(&col[src..src + cols]);
        }
        kernels::col2im(g, &per, &mut out[n * img_len..(n + 1) * img_len]);
    }
    out
}

fn sum_f64<T: Element>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.widen()).sum()
}

#[inline]
fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.push(Vec::new(), vec![v], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// The first element of `v`, widened; meant for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0].widen()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated on push")
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    /// Cross-correlation of an `N×C×H×W` input with an `O×C×kh×kw` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[1] {
            return Err(Error::shape("conv2d", is, ks));
        }
        if bs != [ks[0]] {
            return Err(Error::shape("conv2d", ks, bs));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (batch, out_channels) = (is[0], ks[0]);
        let geom = ConvGeom::new(is[1], is[2], is[3], ks[2], ks[3], stride, padding)
            .ok_or_else(|| Error::shape("conv2d", is, ks))?;
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let col = im2col_batch(&geom, batch, self.value(input));
        let mut out_cm = vec![T::zero(); out_channels * batch * plane];
        kernels::gemm(out_channels, rows, batch * plane, self.value(kernel), &col, &mut out_cm);
        let b = self.value(bias);
        for (o, chunk) in out_cm.chunks_mut(batch * plane).enumerate() {
            for v in chunk {
                *v = *v + b[o];
            }
        }
        let out = batch_major(batch, out_channels, plane, &out_cm);
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            vec![batch, out_channels, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                out_channels,
            },
            rg,
        ))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv2d`] with the same
    /// kernel, mapping `N×Cin×H×W` to `N×Cout×((H−1)s−2p+kh)×((W−1)s−2p+kw)`.
    /// The kernel is laid out `Cin×Cout×kh×kw`.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (is, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        if is.len() != 4 || ks.len() != 4 || is[1] != ks[0] {
            return Err(Error::shape("conv2d_transpose", is, ks));
        }
        if bs != [ks[1]] {
            return Err(Error::shape("conv2d_transpose", ks, bs));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d_transpose", "stride must be positive"));
        }
        let (batch, in_channels, h, w) = (is[0], is[1], is[2], is[3]);
        let (out_channels, kh, kw) = (ks[1], ks[2], ks[3]);
        let oh = ((h - 1) * stride + kh).checked_sub(2 * padding).filter(|&v| v > 0);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * padding).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape("conv2d_transpose", is, ks));
        };
        let geom = ConvGeom::new(out_channels, oh, ow, kh, kw, stride, padding)
            .filter(|g| g.oh == h && g.ow == w)
            .ok_or_else(|| Error::shape("conv2d_transpose", is, ks))?;
        let rows = geom.col_rows();
        let x_cm = channel_major(batch, in_channels, h * w, self.value(input));
        let k_t = kernels::transpose(in_channels, rows, self.value(kernel));
        let mut col = vec![T::zero(); rows * batch * h * w];
        kernels::gemm(rows, in_channels, batch * h * w, &k_t, &x_cm, &mut col);
        let mut out = col2im_batch(&geom, batch, &col);
        let b = self.value(bias);
        let plane = oh * ow;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % out_channels];
            for v in chunk {
                *v = *v + bv;
            }
        }
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            vec![batch, out_channels, oh, ow],
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                in_channels,
            },
            rg,
        ))
    }

    /// `input · weight + bias` for `N×D` input and `D×K` weight.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (is, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        if is.len() != 2 || ws.len() != 2 || is[1] != ws[0] {
            return Err(Error::shape("affine", is, ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("affine", ws, bs));
        }
        let (n, d, k) = (is[0], is[1], ws[1]);
        let mut out = vec![T::zero(); n * k];
        kernels::gemm(n, d, k, self.value(input), self.value(weight), &mut out);
        let b = self.value(bias);
        for row in out.chunks_mut(k) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(vec![n, k], out, Op::Affine { input, weight, bias }, rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let n = self.node(x);
        let value = n.value.iter().map(|&v| T::narrow(f(v.widen()))).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid_f64)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || numel(sb) == 1 {
            Ok(sa.to_vec())
        } else if numel(sa) == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, sa, sb))
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&shape);
        let value = (0..n)
            .map(|i| {
                let x = va[if va.len() == 1 { 0 } else { i }].widen();
                let y = vb[if vb.len() == 1 { 0 } else { i }].widen();
                T::narrow(f(x, y))
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    /// Elementwise sum; either side may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = sum_f64(self.value(x));
        let rg = self.requires_grad(x);
        self.push(Vec::new(), vec![T::narrow(s)], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let s = sum_f64(vals) / vals.len() as f64;
        let rg = self.requires_grad(x);
        self.push(Vec::new(), vec![T::narrow(s)], Op::Mean(x), rg)
    }

    /// Log-softmax along `axis`, stabilized by subtracting the running max.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("log_softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)].widen()).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (src[at(j)].widen() - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[at(j)] = T::narrow(src[at(j)].widen() - lse);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, Op::LogSoftmax { input: x, outer, len, inner }, rg))
    }

    /// Picks `x[i, index[i]]` from an `N×K` tensor, giving a length-N vector.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= k) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {k} columns")));
        }
        let src = self.value(x);
        let out = index.iter().enumerate().map(|(r, &c)| src[r * k + c]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![index.len()], out, Op::Gather { input: x, index: index.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of the scalar `loss` for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss { shape: shape.to_vec() });
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => kernels::add_assign(g, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Gradient for an operand that may have been broadcast from one element.
    fn reduce_to(&self, v: Var, contribution: Vec<T>) -> Vec<T> {
        if self.value(v).len() == 1 && contribution.len() != 1 {
            vec![T::narrow(sum_f64(&contribution))]
        } else {
            contribution
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                out_channels,
            } => {
                let (rows, plane) = (geom.col_rows(), geom.col_cols());
                let g_cm = channel_major(batch, out_channels, plane, g);
                if self.requires_grad(bias) {
                    let db = g_cm.chunks(batch * plane).map(|c| T::narrow(sum_f64(c))).collect();
                    self.accumulate(bias, db);
                }
                if self.requires_grad(kernel) {
                    let col = im2col_batch(&geom, batch, self.value(input));
                    let mut dk = vec![T::zero(); out_channels * rows];
                    kernels::gemm_nt(out_channels, batch * plane, rows, &g_cm, &col, &mut dk);
                    self.accumulate(kernel, dk);
                }
                if self.requires_grad(input) {
                    let k_t = kernels::transpose(out_channels, rows, self.value(kernel));
                    let mut dcol = vec![T::zero(); rows * batch * plane];
                    kernels::gemm(rows, out_channels, batch * plane, &k_t, &g_cm, &mut dcol);
                    let dx = col2im_batch(&geom, batch, &dcol);
                    self.accumulate(input, dx);
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
                batch,
                in_channels,
            } => {
                let rows = geom.col_rows();
                let (h, w) = (geom.oh, geom.ow);
                if self.requires_grad(bias) {
                    let plane = geom.h * geom.w;
                    let mut db = vec![0.0f64; geom.channels];
                    for (j, chunk) in g.chunks(plane).enumerate() {
                        db[j % geom.channels] += sum_f64(chunk);
                    }
                    self.accumulate(bias, db.into_iter().map(T::narrow).collect());
                }
                let need_k = self.requires_grad(kernel);
                let need_x = self.requires_grad(input);
                if need_k || need_x {
                    let gcol = im2col_batch(&geom, batch, g);
                    if need_k {
                        let x_cm = channel_major(batch, in_channels, h * w, self.value(input));
                        let mut dk = vec![T::zero(); in_channels * rows];
                        kernels::gemm_nt(in_channels, batch * h * w, rows, &x_cm, &gcol, &mut dk);
                        self.accumulate(kernel, dk);
                    }
                    if need_x {
                        let mut dx_cm = vec![T::zero(); in_channels * batch * h * w];
                        kernels::gemm(in_channels, rows, batch * h * w, self.value(kernel), &gcol, &mut dx_cm);
                        self.accumulate(input, batch_major(batch, in_channels, h * w, &dx_cm));
                    }
                }
            }
            Op::Affine { input, weight, bias } => {
                let (n, d) = (self.shape(input)[0], self.shape(input)[1]);
                let k = self.shape(weight)[1];
                if self.requires_grad(bias) {
                    let mut db = vec![0.0f64; k];
                    for row in g.chunks(k) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v.widen();
                        }
                    }
                    self.accumulate(bias, db.into_iter().map(T::narrow).collect());
                }
                if self.requires_grad(weight) {
                    let x_t = kernels::transpose(n, d, self.value(input));
                    let mut dw = vec![T::zero(); d * k];
                    kernels::gemm(d, n, k, &x_t, g, &mut dw);
                    self.accumulate(weight, dw);
                }
                if self.requires_grad(input) {
                    let mut dx = vec![T::zero(); n * d];
                    kernels::gemm_nt(n, k, d, g, self.value(weight), &mut dx);
                    self.accumulate(input, dx);
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| {
                        let y = y.widen();
                        T::narrow(g.widen() * y * (1.0 - y))
                    })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Exp(x) => {
                let y = &self.nodes[i].value;
                let dx = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
                self.accumulate(x, dx);
            }
            Op::Ln(x) => {
                let dx = g.iter().zip(self.value(x)).map(|(&g, &v)| g / v).collect();
                self.accumulate(x, dx);
            }
            Op::Softplus(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(&g, &v)| T::narrow(g.widen() * sigmoid_f64(v.widen())))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Add(a, b) => {
                let ga = self.reduce_to(a, g.to_vec());
                let gb = self.reduce_to(b, g.to_vec());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(a, g.to_vec());
                let gb = self.reduce_to(b, g.iter().map(|&v| -v).collect());
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let pick = |vals: &[T], j: usize| vals[if vals.len() == 1 { 0 } else { j }];
                let ga: Vec<T> = g.iter().enumerate().map(|(j, &gv)| gv * pick(vb, j)).collect();
                let gb: Vec<T> = g.iter().enumerate().map(|(j, &gv)| gv * pick(va, j)).collect();
                let ga = self.reduce_to(a, ga);
                let gb = self.reduce_to(b, gb);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Scale(x, c) => {
                let dx = g.iter().map(|&v| T::narrow(v.widen() * c)).collect();
                self.accumulate(x, dx);
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate(x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                let v = T::narrow(g[0].widen() / n as f64);
                self.accumulate(x, vec![v; n]);
            }
            Op::LogSoftmax { input, outer, len, inner } => {
                let y = &self.nodes[i].value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + k;
                        let gs: f64 = (0..len).map(|j| g[at(j)].widen()).sum();
                        for j in 0..len {
                            let p = y[at(j)].widen().exp();
                            dx[at(j)] = T::narrow(g[at(j)].widen() - p * gs);
                        }
                    }
                }
                self.accumulate(input, dx);
            }
            Op::Gather { input, index } => {
                let k = self.shape(input)[1];
                let mut dx = vec![T::zero(); self.value(input).len()];
                for (r, (&c, &gv)) in index.iter().zip(g).enumerate() {
                    dx[r * k + c] = dx[r * k + c] + gv;
                }
                self.accumulate(input, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_diagonal_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.constant(&t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[5.0]);
    }

    #[test]
    fn conv2d_zero_kernel_gives_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::from_fn(vec![2, 3, 5, 5], |i| i as f32 * 0.1));
        let k = g.constant(&Tensor::zeros(vec![4, 3, 3, 3]));
        let b = g.constant(&Tensor::full(vec![4], 0.25));
        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 3]);
        assert!(g.value(y).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(vec![1, 2, 4, 4]));
        let k = g.constant(&Tensor::zeros(vec![1, 3, 3, 3]));
        let b = g.constant(&Tensor::zeros(vec![1]));
        let err = g.conv2d(x, k, b, 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn conv_transpose_broadcasts_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[1, 1, 1, 1], &[2.0]));
        let k = g.constant(&t(&[1, 1, 2, 2], &[1.0; 4]));
        let b = g.constant(&t(&[1], &[0.0]));
        let y = g.conv2d_transpose(x, k, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[2.0; 4]);
    }

    #[test]
    fn conv_transpose_zero_input_gives_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(vec![2, 3, 7, 7]));
        let k = g.constant(&Tensor::from_fn(vec![3, 2, 4, 4], |i| i as f32));
        let b = g.constant(&Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        let y = g.conv2d_transpose(x, k, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 14, 14]);
        for (j, plane) in g.value(y).chunks(196).enumerate() {
            let want = if j % 2 == 0 { 0.5 } else { -1.0 };
            assert!(plane.iter().all(|&v| v == want));
        }
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = g.constant(&Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zero = g.constant(&Tensor::zeros(vec![3]));
        let y = g.affine(x, eye, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let w0 = g.constant(&Tensor::zeros(vec![3, 2]));
        let b = g.constant(&t(&[2], &[7.0, -1.0]));
        let y = g.affine(x, w0, b).unwrap();
        assert_eq!(g.value(y), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let z = g.constant_scalar(0.0);
        let s = g.sigmoid(z);
        assert_eq!(g.value(s), &[0.5]);
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(&Tensor::zeros(vec![3]));
        let b = g.constant(&Tensor::zeros(vec![4]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        let s = g.constant_scalar(2.0);
        assert!(g.mul(a, s).is_ok());
    }

    #[test]
    fn log_softmax_uniform_and_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(vec![1, 4]));
        let y = g.log_softmax(x, 1).unwrap();
        for &v in g.value(y) {
            assert!((v as f64 + 4f64.ln()).abs() < 1e-6);
        }
        let x = g.constant(&Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = g.log_softmax(x, 1).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let w = g.param(&Tensor::from_fn(vec![5], |i| i as f32));
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn backward_of_square_is_twice() {
        let mut g = Graph::<f32>::new();
        let w = g.param(&Tensor::from_fn(vec![4], |i| i as f32 - 1.5));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        let want: Vec<f32> = g.value(w).iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(w).unwrap(), want.as_slice());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(&t(&[3], &[0.5, -1.0, 2.0]));
        let s1 = g.sum(w);
        let sq = g.mul(w, w).unwrap();
        let s2 = g.sum(sq);
        let f = g.add(s1, s2).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, -1.0, 5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let w = g.param(&Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn backward_twice_recomputes() {
        let mut g = Graph::<f64>::new();
        let w = g.param(&t(&[2], &[1.0, 2.0]));
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(&t(&[2], &[1.0, 2.0]));
        let w = g.param(&t(&[2], &[3.0, 4.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(&Tensor::zeros(vec![2, 3]));
        assert!(g.gather(x, &[0, 3]).is_err());
        assert!(g.gather(x, &[0]).is_err());
    }
}
