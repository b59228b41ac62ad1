//! Reverse-mode differentiation over a linear operation record.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so a
//! single reverse sweep visits each node once in a valid order.

use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-8;
/// Variance floor of instance normalization.
pub const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Log(Var),
    Square(Var),
    Exp(Var),
    Relu(Var),
    Softmax(Var),
    Resize {
        x: Var,
        h: usize,
        w: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxes {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MatMul(Var, Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Operation record. One tape per forward pass; not shareable across
/// threads while recording.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates ops without keeping anything for backward.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let needs = self.recording;
        self.push(value, Op::Leaf, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(op, self.value(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), ng))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::MulScalar(a, s), ng)
    }

    /// Natural log of `max(x, 1e-8)`.
    pub fn log(&mut self, a: Var) -> Var {
        let floor = T::lit(LOG_CLAMP);
        let out = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Log(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Square(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_channels()?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn bilinear_resize(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(a).dims4("bilinear_resize")?;
        let out = self.value(a).resize_bilinear(out_h, out_w)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::Resize { x: a, h, w }, ng))
    }

    /// Sum of all elements, rank-0 result.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Mean(a), ng)
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        if let Some(&bad) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(Error::shape("sum_axes", format!("axis {bad} for rank {rank}")));
        }
        let mut oshape = x.shape().to_vec();
        for &ax in axes {
            oshape[ax] = 1;
        }
        let ostrides = strides(&oshape);
        let mut out = vec![T::zero(); numel(&oshape)];
        for_each_index(x.shape(), |i, idx| {
            out[reduced_offset(idx, &oshape, &ostrides)] += x.data()[i];
        });
        let out = Tensor::new(oshape, out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(
            out,
            Op::SumAxes { x: a },
            ng,
        ))
    }

    /// 2×2, stride-2 max pooling over an `N×C×H×W` map with even `H`, `W`.
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c, h, w) = x.dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", format!("odd spatial size {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let d = x.data();
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[j] > d[best] {
                            best = j;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::MaxPool2 { x: a, argmax }, ng))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.value(a).dims4("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).dims4("concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            out.extend_from_slice(&self.value(a).data()[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat { a, b }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            T::zero(),
            &mut out,
            (n, 1),
        );
        let out = Tensor::new(vec![m, n], out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Cross-correlation of `N×Cin×H×W` input with a `Cout×Cin×k×k` kernel.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, cin, h, w) = self.value(x).dims4("conv2d")?;
        let (cout, kcin, k, k2) = self.value(kernel).dims4("conv2d")?;
        if kcin != cin || k != k2 || k % 2 == 0 || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?}, kernel {:?}, stride {stride}",
                    self.shape(x),
                    self.shape(kernel)
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {cout} output channels", self.shape(b)),
                ));
            }
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < k || span_w < k || (span_h - k) % stride != 0 || (span_w - k) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("{h}×{w} with k={k}, pad={pad}, stride={stride} is not integral"),
            ));
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            oh: (span_h - k) / stride + 1,
            ow: (span_w - k) / stride + 1,
        };
        let (rows, ncols) = (geom.rows(), geom.cols());
        let keep_cols = self.recording && self.nodes[kernel.0].needs_grad;
        let mut saved = if keep_cols {
            vec![T::zero(); n * rows * ncols]
        } else {
            Vec::new()
        };
        let mut scratch = if keep_cols {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncols]
        };
        let mut out = vec![T::zero(); n * cout * ncols];
        {
            let xd = self.value(x).data();
            let wd = self.value(kernel).data();
            let bd = bias.map(|b| self.value(b).data());
            for s in 0..n {
                let cols = if keep_cols {
                    &mut saved[s * rows * ncols..(s + 1) * rows * ncols]
                } else {
                    &mut scratch[..]
                };
                kernels::im2col(&xd[s * cin * h * w..(s + 1) * cin * h * w], &geom, cols);
                let o = &mut out[s * cout * ncols..(s + 1) * cout * ncols];
                if let Some(bd) = bd {
                    for (co, row) in o.chunks_mut(ncols).enumerate() {
                        row.fill(bd[co]);
                    }
                }
                T::gemm(
                    cout,
                    rows,
                    ncols,
                    T::one(),
                    wd,
                    (rows, 1),
                    cols,
                    (ncols, 1),
                    T::one(),
                    o,
                    (ncols, 1),
                );
            }
        }
        let out = Tensor::new(vec![n, cout, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let ng = self.any_grad(&inputs);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w: kernel,
                b: bias,
                geom,
                cols: saved,
            },
            ng,
        ))
    }

    /// Per-sample, per-channel normalization with affine `gamma`, `beta` (shape `C`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("instance_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "instance_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let hw = h * w;
        let inv_hw = T::lit(1.0 / hw as f64);
        let eps = T::lit(NORM_EPS);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); n * c * hw];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); n * c * hw];
        for p in 0..n * c {
            let ch = p % c;
            let src = &xd[p * hw..(p + 1) * hw];
            let mean = src.iter().copied().sum::<T>() * inv_hw;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for i in 0..hw {
                let xh = (src[i] - mean) * is;
                xhat[p * hw + i] = xh;
                out[p * hw + i] = gd[ch] * xh + bd[ch];
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let ng = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Reverse sweep from a single-element `loss`. Leaf gradients accumulate
    /// across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, b, g.clone());
                self.accumulate(grads, a, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
                self.accumulate(grads, a, g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let ga = g.iter().zip(bv).map(|(&g, &y)| g * y).collect();
                let gb = g.iter().zip(av).map(|(&g, &x)| g * x).collect();
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let ga = g.iter().zip(bv).map(|(&g, &y)| g / y).collect();
                let gb = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(grads, a, g);
            }
            Op::MulScalar(a, s) => {
                let (a, s) = (*a, *s);
                self.accumulate(grads, a, g.iter().map(|&v| v * s).collect());
            }
            Op::Log(a) => {
                let a = *a;
                let floor = T::lit(LOG_CLAMP);
                let ga = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x > floor { g / x } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Square(a) => {
                let a = *a;
                let two = T::lit(2.0);
                let ga = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| two * g * x)
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Exp(a) => {
                let a = *a;
                let ga = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &y)| g * y)
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Relu(a) => {
                let a = *a;
                let ga = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, a, ga);
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = node.value.data();
                let (n, c, h, w) = node.value.dims4("softmax_channels")?;
                let hw = h * w;
                let mut ga = vec![T::zero(); g.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let dot: T = (0..c)
                            .map(|ch| g[base + ch * hw + p] * y[base + ch * hw + p])
                            .sum();
                        for ch in 0..c {
                            let j = base + ch * hw + p;
                            ga[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::Resize { x, h, w } => {
                let (x, h, w) = (*x, *h, *w);
                let (n, c, oh, ow) = node.value.dims4("bilinear_resize")?;
                let gx = if (oh, ow) == (h, w) {
                    g
                } else {
                    kernels::resize_backward(&g, n * c, h, w, oh, ow)
                };
                self.accumulate(grads, x, gx);
            }
            Op::Sum(a) => {
                let a = *a;
                let len = self.value(a).len();
                self.accumulate(grads, a, vec![g[0]; len]);
            }
            Op::Mean(a) => {
                let a = *a;
                let len = self.value(a).len();
                let v = g[0] / T::lit(len as f64);
                self.accumulate(grads, a, vec![v; len]);
            }
            Op::SumAxes { x } => {
                let x = *x;
                let oshape = node.value.shape().to_vec();
                let ostrides = strides(&oshape);
                let xs = self.value(x).shape().to_vec();
                let mut gx = vec![T::zero(); numel(&xs)];
                for_each_index(&xs, |i, idx| {
                    gx[i] = g[reduced_offset(idx, &oshape, &ostrides)];
                });
                self.accumulate(grads, x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let x = *x;
                let mut gx = vec![T::zero(); self.value(x).len()];
                for (&j, &v) in argmax.iter().zip(&g) {
                    gx[j] += v;
                }
                self.accumulate(grads, x, gx);
            }
            Op::Concat { a, b } => {
                let (a, b) = (*a, *b);
                let (n, ca, h, w) = self.value(a).dims4("concat_channels")?;
                let cb = self.shape(b)[1];
                let hw = h * w;
                let mut ga = Vec::with_capacity(n * ca * hw);
                let mut gb = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    ga.extend_from_slice(&g[base..base + ca * hw]);
                    gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Reshape(a) => {
                let a = *a;
                self.accumulate(grads, a, g);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                let ga = if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); m * k];
                    // g (m×n) · bᵀ (n×k)
                    T::gemm(m, n, k, T::one(), &g, (n, 1), bv, (1, n), T::zero(), &mut ga, (k, 1));
                    Some(ga)
                } else {
                    None
                };
                let gb = if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); k * n];
                    // aᵀ (k×m) · g (m×n)
                    T::gemm(k, m, n, T::one(), av, (1, k), &g, (n, 1), T::zero(), &mut gb, (n, 1));
                    Some(gb)
                } else {
                    None
                };
                if let Some(ga) = ga {
                    self.accumulate(grads, a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, b, gb);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (n, c, h, w) = node.value.dims4("instance_norm")?;
                let hw = h * w;
                let inv_hw = T::lit(1.0 / hw as f64);
                let gd = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); n * c * hw];
                for p in 0..n * c {
                    let ch = p % c;
                    let gs = &g[p * hw..(p + 1) * hw];
                    let xh = &xhat[p * hw..(p + 1) * hw];
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for (&gv, &xv) in gs.iter().zip(xh) {
                        sum_g += gv;
                        sum_gx += gv * xv;
                    }
                    dbeta[ch] += sum_g;
                    dgamma[ch] += sum_gx;
                    // dxhat = g·γ; dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))
                    let scale = gd[ch] * inv_std[p];
                    let m1 = sum_g * inv_hw;
                    let m2 = sum_gx * inv_hw;
                    for i in 0..hw {
                        dx[p * hw + i] = scale * (gs[i] - m1 - xh[i] * m2);
                    }
                }
                self.accumulate(grads, x, dx);
                self.accumulate(grads, gamma, dgamma);
                self.accumulate(grads, beta, dbeta);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (x, wv, b, geom) = (*x, *w, *b, *geom);
                let n = self.shape(x)[0];
                let cout = self.shape(wv)[0];
                let (rows, ncols) = (geom.rows(), geom.cols());
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let mut gb = vec![T::zero(); cout];
                        for s in 0..n {
                            for (co, acc) in gb.iter_mut().enumerate() {
                                let base = (s * cout + co) * ncols;
                                *acc += g[base..base + ncols].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, b, gb);
                    }
                }
                if self.nodes[wv.0].needs_grad {
                    let mut gw = vec![T::zero(); cout * rows];
                    for s in 0..n {
                        // g_s (cout×P) · cols_sᵀ (P×rows)
                        T::gemm(
                            cout,
                            ncols,
                            rows,
                            T::one(),
                            &g[s * cout * ncols..(s + 1) * cout * ncols],
                            (ncols, 1),
                            &cols[s * rows * ncols..(s + 1) * rows * ncols],
                            (1, ncols),
                            T::one(),
                            &mut gw,
                            (rows, 1),
                        );
                    }
                    self.accumulate(grads, wv, gw);
                }
                if self.nodes[x.0].needs_grad {
                    let (cin, h, wd) = (geom.cin, geom.h, geom.w);
                    let kd = self.value(wv).data();
                    let mut gx = vec![T::zero(); n * cin * h * wd];
                    let mut dcols = vec![T::zero(); rows * ncols];
                    for s in 0..n {
                        // kernelᵀ (rows×cout) · g_s (cout×P)
                        T::gemm(
                            rows,
                            cout,
                            ncols,
                            T::one(),
                            kd,
                            (1, rows),
                            &g[s * cout * ncols..(s + 1) * cout * ncols],
                            (ncols, 1),
                            T::zero(),
                            &mut dcols,
                            (ncols, 1),
                        );
                        kernels::col2im(
                            &dcols,
                            &geom,
                            &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd],
                        );
                    }
                    self.accumulate(grads, x, gx);
                }
            }
        }
        Ok(())
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn reduced_offset(idx: &[usize], oshape: &[usize], ostrides: &[usize]) -> usize {
    idx.iter()
        .zip(oshape)
        .zip(ostrides)
        .map(|((&i, &d), &s)| if d == 1 { 0 } else { i * s })
        .sum()
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..numel(shape) {
        f(flat, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
