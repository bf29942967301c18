use super::kernels::{conv_backward, conv_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    AddBias { x: Var, bias: Var },
    ScaleChannels { x: Var, scale: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Slog(Var, T),
    Abs(Var),
    Square(Var),
    Hypot(Var, Var),
    SoftmaxChannels(Var),
    Sum(Var),
    Mean(Var),
    MeanBatch(Var),
    Reshape(Var),
    RepeatBatch(Var),
    Concat(Vec<Var>),
    SoftHistogram { lum: Var, labels: Var, bins: usize },
    NormalizeColumns(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias { .. } => "add_bias",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Slog(..) => "slog",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Hypot(..) => "hypot",
            Op::SoftmaxChannels(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanBatch(..) => "mean_batch",
            Op::Reshape(..) => "reshape",
            Op::RepeatBatch(..) => "repeat_batch",
            Op::Concat(..) => "concat",
            Op::SoftHistogram { .. } => "soft_histogram",
            Op::NormalizeColumns(..) => "normalize_columns",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded tensor operations with reverse-mode differentiation.
///
/// Nodes are immutable once recorded. Gradients of trainable leaves live in a
/// side table and accumulate across [`Graph::backward`] calls until
/// [`Graph::zero_grad`].
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Position of a luminance value on the bin axis: `(lower bin, upper weight, d pos / d value)`.
pub(crate) fn bin_position<T: Scalar>(v: T, bins: usize) -> (usize, T, T) {
    let width = T::lit(2.0) / T::from_usize_lossy(bins);
    let t = (v + T::one()) / width - T::lit(0.5);
    let top = T::from_usize_lossy(bins - 1);
    if t <= T::zero() {
        (0, T::zero(), T::zero())
    } else if t >= top {
        (bins - 2, T::one(), T::zero())
    } else {
        let lo = t.floor();
        let lo_i = lo.to_usize().expect("bin index").min(bins - 2);
        (lo_i, t - T::from_usize_lossy(lo_i), T::one() / width)
    }
}

/// Column mass below which a conditional distribution column counts as empty.
pub(crate) fn empty_column_mass<T: Scalar>() -> T {
    T::lit(1e-8)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: 0,
                term: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; trainable iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let rg = t.requires_grad;
        let mut t = t;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.requires_grad = false;
        self.input(t)
    }

    pub fn param(&mut self, mut t: Tensor<T>) -> Result<Var> {
        t.requires_grad = true;
        self.input(t)
    }

    pub fn scalar(&mut self, v: T) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Operation names of every recorded node, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Operation names of the nodes `root` depends on.
    pub fn ancestry_op_names(&self, root: Var) -> Vec<&'static str> {
        let mut seen = vec![false; root.0 + 1];
        let mut stack = vec![root];
        let mut names = Vec::new();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            let op = &self.nodes[v.0].op;
            names.push(op.name());
            stack.extend(op_inputs(op));
        }
        names
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    fn zip_binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// `x[n, c, ...] + bias[c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() < 2 || bs != [xs[1]] {
            return Err(Error::dim("add_bias", &xs, &bs));
        }
        let inner: usize = xs[2..].iter().product();
        let b = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += b[(i / inner) % xs[1]];
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(Tensor::new(&xs, data)?, Op::AddBias { x, bias }, rg)
    }

    /// `x[n, c, ...] * scale[n, c]`.
    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(scale).to_vec();
        if xs.len() < 2 || ss != xs[..2] {
            return Err(Error::dim("scale_channels", &xs, &ss));
        }
        let inner: usize = xs[2..].iter().product();
        let s = self.data(scale).to_vec();
        let mut data = self.data(x).to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= s[i / inner];
        }
        let rg = self.rg(x) || self.rg(scale);
        self.push(Tensor::new(&xs, data)?, Op::ScaleChannels { x, scale }, rg)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::dim("matmul", &as_, &bs));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, m, k, n }, rg)
    }

    /// Square-kernel 2-D cross-correlation with zero padding.
    ///
    /// `x: [n, c_in, h, w]`, `w: [c_out, c_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let out = conv_forward(&geom, self.data(x), self.data(w));
        let shape = [geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(&shape, out)?, Op::Conv2d { x, w, geom }, rg)
    }

    /// Nearest-neighbour ×2 upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("upsample2x", &xs, &[0, 0, 0, 0]));
        }
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let src = self.data(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[xs[0], xs[1], 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.map_unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, T::zero())
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Tanh(x), |v| v.tanh())
    }

    /// Symmetric logarithm `sign(x)·ln(a|x| + 1)`.
    pub fn slog(&mut self, x: Var, a: T) -> Result<Var> {
        if !(a > T::zero()) {
            return Err(Error::config(format!("slog slope must be positive, got {a}")));
        }
        self.map_unary(x, Op::Slog(x, a), |v| slog_value(v, a))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_unary(x, Op::Square(x), |v| v * v)
    }

    /// Element-wise `sqrt(a² + b²)`; the gradient at the origin is taken as 0.
    pub fn hypot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("hypot", a, b, Op::Hypot(a, b), |x, y| (x * x + y * y).sqrt())
    }

    /// Softmax along axis 1 of `[n, c, ...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("softmax", &xs, &[0, 0]));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for s in 0..inner {
                let at = |ch: usize| (b * c + ch) * inner + s;
                let mx = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ch in 0..c {
                    let e = (src[at(ch)] - mx).exp();
                    out[at(ch)] = e;
                    z += e;
                }
                for ch in 0..c {
                    out[at(ch)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&xs, out)?, Op::SoftmaxChannels(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::from_usize_lossy(d.len());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over the leading axis: `[n, ...] -> [...]`.
    pub fn mean_batch(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("mean_batch", &xs, &[0, 0]));
        }
        let inner: usize = xs[1..].iter().product();
        let inv = T::one() / T::from_usize_lossy(xs[0]);
        let mut out = vec![T::zero(); inner];
        for chunk in self.data(x).chunks(inner) {
            out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(x);
        self.push(Tensor::new(&xs[1..], out)?, Op::MeanBatch(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Tiles a `[1, ...]` tensor to `[n, ...]`.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || xs[0] != 1 || n == 0 {
            return Err(Error::dim("repeat_batch", &xs, &[n]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = xs;
        shape[0] = n;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out)?, Op::RepeatBatch(x), rg)
    }

    /// Concatenation along axis 1 of `[n, c_i, ...]` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::contract("concat of nothing"))?).to_vec();
        if first.len() < 2 {
            return Err(Error::dim("concat", &first, &[0, 0]));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != first[0] || s[2..] != first[2..] {
                return Err(Error::dim("concat", &first, s));
            }
            channels += s[1];
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * inner);
        for b in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.data(p)[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec()), rg)
    }

    /// Joint soft histogram `[bins, c]` of luminance `[n, h, w]` against
    /// per-pixel label weights `[n, c, h, w]`.
    ///
    /// Bin centres are evenly spaced over `[-1, 1]`; each pixel spreads its
    /// label weight over the two nearest centres with a triangular kernel.
    pub fn soft_histogram(&mut self, lum: Var, labels: Var, bins: usize) -> Result<Var> {
        let (ls, ys) = (self.shape(lum).to_vec(), self.shape(labels).to_vec());
        if ls.len() != 3 || ys.len() != 4 || ys[0] != ls[0] || ys[2..] != ls[1..] {
            return Err(Error::dim("soft_histogram", &ls, &ys));
        }
        if bins < 2 {
            return Err(Error::config("soft histogram needs at least 2 bins"));
        }
        let (n, c) = (ys[0], ys[1]);
        let plane = ls[1] * ls[2];
        let (l, y) = (self.data(lum), self.data(labels));
        let mut out = vec![T::zero(); bins * c];
        for b in 0..n {
            for s in 0..plane {
                let (lo, f, _) = bin_position(l[b * plane + s], bins);
                for ch in 0..c {
                    let wgt = y[(b * c + ch) * plane + s];
                    out[lo * c + ch] += (T::one() - f) * wgt;
                    out[(lo + 1) * c + ch] += f * wgt;
                }
            }
        }
        let rg = self.rg(lum) || self.rg(labels);
        self.push(Tensor::new(&[bins, c], out)?, Op::SoftHistogram { lum, labels, bins }, rg)
    }

    /// Divides every column of `[rows, cols]` by its sum; empty columns become uniform.
    pub fn normalize_columns(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::dim("normalize_columns", &xs, &[0, 0]));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let src = self.data(x);
        let mut out = vec![T::zero(); rows * cols];
        for c in 0..cols {
            let mass: T = (0..rows).map(|r| src[r * cols + c]).sum();
            for r in 0..rows {
                out[r * cols + c] = if mass > empty_column_mass() {
                    src[r * cols + c] / mass
                } else {
                    T::one() / T::from_usize_lossy(rows)
                };
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&xs, out)?, Op::NormalizeColumns(x), rg)
    }

    /// Mean per-pixel cross-entropy of logits `[n, c, ...]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let xs = self.shape(logits).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("cross_entropy", &xs, &[targets.len()]));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if targets.len() != n * inner {
            return Err(Error::dim("cross_entropy", &xs, &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::contract(format!("target class {bad} out of range 0..{c}")));
        }
        let src = self.data(logits);
        let mut total = T::zero();
        for b in 0..n {
            for s in 0..inner {
                let at = |ch: usize| (b * c + ch) * inner + s;
                let mx = (0..c).map(|ch| src[at(ch)]).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|ch| (src[at(ch)] - mx).exp()).sum::<T>().ln() + mx;
                total += lse - src[at(targets[b * inner + s])];
            }
        }
        let loss = total / T::from_usize_lossy(n * inner);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Mean absolute error between equally shaped tensors.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean(d)
    }

    /// Back-propagates from a one-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads[i].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    None => self.leaf_grads[i] = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = nodes[i].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g))
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                let shape = nodes[i].value.shape();
                let (ch, inner) = (shape[1], shape[2..].iter().product::<usize>());
                acc(*bias, &mut |d| {
                    for (k, &gv) in g.iter().enumerate() {
                        d[(k / inner) % ch] += gv;
                    }
                });
            }
            Op::ScaleChannels { x, scale } => {
                let shape = nodes[i].value.shape();
                let inner: usize = shape[2..].iter().product();
                let (xv, sv) = (val(*x), val(*scale));
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * sv[k / inner];
                    }
                });
                acc(*scale, &mut |d| {
                    for k in 0..g.len() {
                        d[k / inner] += g[k] * xv[k];
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                // da = g · b^T, db = a^T · g
                acc(*a, &mut |d| {
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), bv, (1, n as isize), T::one(), d, (k as isize, 1))
                });
                acc(*b, &mut |d| {
                    T::gemm(k, m, n, T::one(), av, (1, k as isize), g, (n as isize, 1), T::one(), d, (n as isize, 1))
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = conv_backward(geom, val(*x), val(*w), g, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc(*x, &mut |d| d.iter_mut().zip(&dx).for_each(|(d, &v)| *d += v));
                }
                if let Some(dw) = dw {
                    acc(*w, &mut |d| d.iter_mut().zip(&dw).for_each(|(d, &v)| *d += v));
                }
            }
            Op::Upsample2x(x) => {
                let s = nodes[x.0].value.shape();
                let (h, w) = (s[2], s[3]);
                acc(*x, &mut |d| {
                    for p in 0..s[0] * s[1] {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += if xv[k] > T::zero() { g[k] } else { g[k] * *slope };
                    }
                });
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * (T::one() - out[k] * out[k]);
                }
            }),
            Op::Slog(x, a) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * slog_derivative(xv[k], *a);
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let s = if xv[k] > T::zero() {
                            T::one()
                        } else if xv[k] < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        d[k] += g[k] * s;
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * T::lit(2.0) * xv[k];
                    }
                });
            }
            Op::Hypot(a, b) => {
                for v in [*a, *b] {
                    let vv = val(v);
                    acc(v, &mut |d| {
                        for k in 0..d.len() {
                            if out[k] > T::zero() {
                                d[k] += g[k] * vv[k] / out[k];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxChannels(x) => {
                let shape = nodes[i].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                acc(*x, &mut |d| {
                    for b in 0..n {
                        for s in 0..inner {
                            let at = |ch: usize| (b * c + ch) * inner + s;
                            let dot: T = (0..c).map(|ch| out[at(ch)] * g[at(ch)]).sum();
                            for ch in 0..c {
                                d[at(ch)] += out[at(ch)] * (g[at(ch)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let inv = T::one() / T::from_usize_lossy(nodes[x.0].value.len());
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] * inv))
            }
            Op::MeanBatch(x) => {
                let n = nodes[x.0].value.shape()[0];
                let inv = T::one() / T::from_usize_lossy(n);
                acc(*x, &mut |d| {
                    for chunk in d.chunks_mut(g.len()) {
                        chunk.iter_mut().zip(g).for_each(|(d, &g)| *d += g * inv);
                    }
                });
            }
            Op::RepeatBatch(x) => {
                let inner = nodes[x.0].value.len();
                acc(*x, &mut |d| {
                    for chunk in g.chunks(inner) {
                        d.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Concat(parts) => {
                let shape = nodes[i].value.shape();
                let (n, total) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(p, &mut |d| {
                        for b in 0..n {
                            let src = &g[(b * total + offset) * inner..(b * total + offset + c) * inner];
                            d[b * c * inner..(b + 1) * c * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g);
                        }
                    });
                    offset += c;
                }
            }
            Op::SoftHistogram { lum, labels, bins } => {
                let bins = *bins;
                let ys = nodes[labels.0].value.shape();
                let (n, c) = (ys[0], ys[1]);
                let plane = ys[2] * ys[3];
                let (lv, yv) = (val(*lum), val(*labels));
                acc(*lum, &mut |d| {
                    for b in 0..n {
                        for s in 0..plane {
                            let (lo, _, slope) = bin_position(lv[b * plane + s], bins);
                            if slope == T::zero() {
                                continue;
                            }
                            let mut dv = T::zero();
                            for ch in 0..c {
                                dv += yv[(b * c + ch) * plane + s] * (g[(lo + 1) * c + ch] - g[lo * c + ch]);
                            }
                            d[b * plane + s] += dv * slope;
                        }
                    }
                });
                acc(*labels, &mut |d| {
                    for b in 0..n {
                        for s in 0..plane {
                            let (lo, f, _) = bin_position(lv[b * plane + s], bins);
                            for ch in 0..c {
                                d[(b * c + ch) * plane + s] +=
                                    (T::one() - f) * g[lo * c + ch] + f * g[(lo + 1) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::NormalizeColumns(x) => {
                let shape = nodes[i].value.shape();
                let (rows, cols) = (shape[0], shape[1]);
                let xv = val(*x);
                acc(*x, &mut |d| {
                    for c in 0..cols {
                        let mass: T = (0..rows).map(|r| xv[r * cols + c]).sum();
                        if mass <= empty_column_mass() {
                            continue;
                        }
                        let dot: T = (0..rows).map(|r| g[r * cols + c] * out[r * cols + c]).sum();
                        for r in 0..rows {
                            d[r * cols + c] += (g[r * cols + c] - dot) / mass;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let shape = nodes[logits.0].value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let xv = val(*logits);
                let scale = g[0] / T::from_usize_lossy(n * inner);
                acc(*logits, &mut |d| {
                    for b in 0..n {
                        for s in 0..inner {
                            let at = |ch: usize| (b * c + ch) * inner + s;
                            let mx = (0..c).map(|ch| xv[at(ch)]).fold(T::neg_infinity(), T::max);
                            let z: T = (0..c).map(|ch| (xv[at(ch)] - mx).exp()).sum();
                            for ch in 0..c {
                                let p = (xv[at(ch)] - mx).exp() / z;
                                let onehot = if ch == targets[b * inner + s] { T::one() } else { T::zero() };
                                d[at(ch)] += scale * (p - onehot);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Hypot(a, b) => vec![*a, *b],
        Op::AddBias { x, bias: y }
        | Op::ScaleChannels { x, scale: y }
        | Op::MatMul { a: x, b: y, .. }
        | Op::Conv2d { x, w: y, .. }
        | Op::SoftHistogram { lum: x, labels: y, .. } => vec![*x, *y],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Upsample2x(x)
        | Op::LeakyRelu(x, _)
        | Op::Tanh(x)
        | Op::Slog(x, _)
        | Op::Abs(x)
        | Op::Square(x)
        | Op::SoftmaxChannels(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::MeanBatch(x)
        | Op::Reshape(x)
        | Op::RepeatBatch(x)
        | Op::NormalizeColumns(x)
        | Op::CrossEntropy { logits: x, .. } => vec![*x],
        Op::Concat(parts) => parts.clone(),
    }
}

/// `sign(x)·ln(a|x| + 1)`, exactly odd in `x`.
pub fn slog_value<T: Scalar>(x: T, a: T) -> T {
    let m = (a * x.abs()).ln_1p();
    if x < T::zero() {
        -m
    } else {
        m
    }
}

/// `a / (a|x| + 1)`.
pub fn slog_derivative<T: Scalar>(x: T, a: T) -> T {
    a / (a * x.abs() + T::one())
}
