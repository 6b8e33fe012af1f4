//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so every
//! node's inputs precede it. [`Graph::backward`] walks the tape once in
//! reverse and returns a fresh [`Gradients`] table without mutating the
//! graph, so repeated calls are bit-identical.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    WeightedColumns(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MaxOverSet {
        inputs: Vec<Var>,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::WeightedColumns(..) => "weighted_columns",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::MaxOverSet { .. } => "max_over_set",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation graph recorded in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Parameters enter as constants; used for inference.
    frozen: bool,
}

/// Gradients of one scalar with respect to every node that needs them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph whose parameters never require gradients.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input (images, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf; the value is copied in.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.set_requires_grad(false);
        let needs = !self.frozen;
        self.leaf(value, needs)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::WeightedColumns(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b) => {
                self.needs(*a) || self.needs(*b)
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::GlobalAvgPool(a)
            | Op::Reshape(a)
            | Op::Sum(a) => self.needs(*a),
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => self.needs(*input) || self.needs(*kernels) || bias.is_some_and(|b| self.needs(b)),
            Op::Concat { parts, .. } => parts.iter().any(|p| self.needs(*p)),
            Op::MaxOverSet { inputs, .. } => inputs.iter().any(|p| self.needs(*p)),
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
        };
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err!("{what}: expected a matrix, got {s:?}")),
        }
    }

    fn dims1(&self, v: Var, what: &str) -> Result<usize> {
        match *self.shape(v) {
            [n] => Ok(n),
            ref s => Err(shape_err!("{what}: expected a vector, got {s:?}")),
        }
    }

    /// `a[p×q] · b[q×r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a, "matmul lhs")?;
        let (q2, r) = self.dims2(b, "matmul rhs")?;
        if q != q2 {
            return Err(shape_err!("matmul: inner dimensions {q} and {q2} differ"));
        }
        let mut out = vec![0.0; p * r];
        gemm_nn(self.data(a), self.data(b), &mut out, p, q, r);
        self.push(&[p, r], out, Op::MatMul(a, b))
    }

    /// `w[m×n] · x[n]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(w, "matvec matrix")?;
        let n2 = self.dims1(x, "matvec vector")?;
        if n != n2 {
            return Err(shape_err!("matvec: matrix has {n} columns, vector has {n2}"));
        }
        let (wd, xd) = (self.data(w), self.data(x));
        let out: Vec<f64> = wd.chunks_exact(n).map(|row| dot(row, xd)).collect();
        debug_assert_eq!(out.len(), m);
        self.push(&[m], out, Op::MatVec(w, x))
    }

    /// `values[d×N] · weights[N]` accumulated in sorted order, so the result
    /// is invariant (bit-exact) under a joint permutation of columns and weights.
    pub fn weighted_columns(&mut self, values: Var, weights: Var) -> Result<Var> {
        let (d, n) = self.dims2(values, "weighted_columns values")?;
        let n2 = self.dims1(weights, "weighted_columns weights")?;
        if n != n2 {
            return Err(shape_err!("weighted_columns: {n} columns, {n2} weights"));
        }
        let (vd, wd) = (self.data(values), self.data(weights));
        let out = vd
            .chunks_exact(n)
            .map(|row| sorted_sum(row.iter().zip(wd).map(|(v, w)| v * w).collect()))
            .collect();
        self.push(&[d], out, Op::WeightedColumns(values, weights))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let ad = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        self.push(&[c, r], out, Op::Transpose(a))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "hadamard")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Softmax over a vector, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.dims1(a, "softmax")?;
        let out = softmax(self.data(a));
        self.push(&[n], out, Op::Softmax(a))
    }

    /// 2-D convolution of `input[C_in×H×W]` with `kernels[C_out×C_in×k×k]`,
    /// zero padding, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (c_in, h, w) = match *self.shape(input) {
            [c, h, w] => (c, h, w),
            ref s => return Err(shape_err!("conv2d: input must be C×H×W, got {s:?}")),
        };
        let (c_out, kc, k) = match *self.shape(kernels) {
            [o, i, kh, kw] if kh == kw => (o, i, kh),
            ref s => return Err(shape_err!("conv2d: kernels must be O×I×k×k, got {s:?}")),
        };
        if kc != c_in {
            return Err(shape_err!("conv2d: kernels expect {kc} channels, input has {c_in}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d: stride must be at least 1"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(shape_err!(
                "conv2d: kernel {k} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err!("conv2d: bias shape {:?}, expected [{c_out}]", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.data(input), &geom);
        let positions = geom.h_out * geom.w_out;
        let rows = c_in * k * k;
        let mut out = vec![0.0; c_out * positions];
        gemm_nn(self.data(kernels), &cols, &mut out, c_out, rows, positions);
        if let Some(b) = bias {
            for (chan, bv) in out.chunks_exact_mut(positions).zip(self.data(b)) {
                chan.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.push(
            &[c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            },
        )
    }

    /// Mean over the spatial dims of a `C×H×W` tensor.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, hw) = match *self.shape(a) {
            [c, h, w] => (c, h * w),
            ref s => return Err(shape_err!("global_avg_pool: expected C×H×W, got {s:?}")),
        };
        let out = self
            .data(a)
            .chunks_exact(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(&[c], out, Op::GlobalAvgPool(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err!("reshape: {:?} to {shape:?}", self.shape(a)));
        }
        let out = self.data(a).to_vec();
        self.push(shape, out, Op::Reshape(a))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.concat_all(&[a, b], axis)
    }

    /// Concatenation of any number of tensors along `axis`.
    pub fn concat_all(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err!("concat: no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut axis_len = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            axis_len += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        self.push(
            &shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Coordinatewise maximum over equally-shaped inputs. Ties resolve to the
    /// lowest list index, which also receives the gradient.
    pub fn max_over_set(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("max_over_set: empty input list"))?;
        let shape = self.shape(first).to_vec();
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(shape_err!(
                    "max_over_set: {:?} differs from {shape:?}",
                    self.shape(v)
                ));
            }
        }
        let mut out = self.data(first).to_vec();
        let mut argmax = vec![0; out.len()];
        for (t, &v) in inputs.iter().enumerate().skip(1) {
            for (j, &x) in self.data(v).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = t;
                }
            }
        }
        self.push(
            &shape,
            out,
            Op::MaxOverSet {
                inputs: inputs.to_vec(),
                argmax,
            },
        )
    }

    /// `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let c = self.dims1(logits, "cross_entropy")?;
        if label >= c {
            return Err(Error::Argument(format!(
                "cross_entropy: label {label} out of range for {c} classes"
            )));
        }
        let l = self.data(logits);
        let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = l.iter().map(|x| (x - max).exp()).sum();
        let loss = (max - l[label]) + sum.ln();
        let probs = softmax(l);
        self.push(&[1], vec![loss], Op::CrossEntropy { logits, label, probs })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(&[1], vec![s], Op::Sum(a))
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut acc = *terms
            .first()
            .ok_or_else(|| Error::Argument("add_all: no terms".into()))?;
        for &t in &terms[1..] {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse traversal from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Only inputs that need gradients are written.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.needs(v) {
                let len = self.value(v).numel();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        match op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (p, q) = self.dims2(a, "").unwrap();
                let r = self.shape(b)[1];
                acc(a, &mut |ga| gemm_nt(gout, self.data(b), ga, p, r, q));
                acc(b, &mut |gb| gemm_tn(self.data(a), gout, gb, p, q, r));
            }
            &Op::MatVec(w, x) | &Op::WeightedColumns(w, x) => {
                let n = self.shape(w)[1];
                acc(w, &mut |gw| {
                    let xd = self.data(x);
                    for (row, &g) in gw.chunks_exact_mut(n).zip(gout) {
                        row.iter_mut().zip(xd).for_each(|(r, xv)| *r += g * xv);
                    }
                });
                acc(x, &mut |gx| {
                    for (row, &g) in self.data(w).chunks_exact(n).zip(gout) {
                        gx.iter_mut().zip(row).for_each(|(r, wv)| *r += g * wv);
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = self.dims2(a, "").unwrap();
                acc(a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, gout));
                acc(b, &mut |gb| add_into(gb, gout));
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |ga| {
                    for ((g, go), bv) in ga.iter_mut().zip(gout).zip(self.data(b)) {
                        *g += go * bv;
                    }
                });
                acc(b, &mut |gb| {
                    for ((g, go), av) in gb.iter_mut().zip(gout).zip(self.data(a)) {
                        *g += go * av;
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| {
                ga.iter_mut().zip(gout).for_each(|(g, go)| *g += go * s)
            }),
            &Op::Sigmoid(a) => acc(a, &mut |ga| {
                for ((g, go), y) in ga.iter_mut().zip(gout).zip(out.data()) {
                    *g += go * y * (1.0 - y);
                }
            }),
            &Op::Tanh(a) => acc(a, &mut |ga| {
                for ((g, go), y) in ga.iter_mut().zip(gout).zip(out.data()) {
                    *g += go * (1.0 - y * y);
                }
            }),
            &Op::Relu(a) => acc(a, &mut |ga| {
                for ((g, go), x) in ga.iter_mut().zip(gout).zip(self.data(a)) {
                    if *x > 0.0 {
                        *g += go;
                    }
                }
            }),
            &Op::Softmax(a) => acc(a, &mut |ga| {
                let y = out.data();
                let inner = dot(gout, y);
                for ((g, go), yv) in ga.iter_mut().zip(gout).zip(y) {
                    *g += yv * (go - inner);
                }
            }),
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                cols,
            } => {
                let positions = geom.h_out * geom.w_out;
                let rows = geom.c_in * geom.k * geom.k;
                acc(*kernels, &mut |gk| gemm_nt(gout, cols, gk, geom.c_out, positions, rows));
                if let Some(b) = *bias {
                    acc(b, &mut |gb| {
                        for (g, chan) in gb.iter_mut().zip(gout.chunks_exact(positions)) {
                            *g += chan.iter().sum::<f64>();
                        }
                    });
                }
                acc(*input, &mut |gi| {
                    let mut dcols = vec![0.0; rows * positions];
                    gemm_tn(self.data(*kernels), gout, &mut dcols, geom.c_out, rows, positions);
                    col2im_add(&dcols, geom, gi);
                });
            }
            &Op::GlobalAvgPool(a) => {
                let hw = self.value(a).numel() / out.numel();
                acc(a, &mut |ga| {
                    for (chan, go) in ga.chunks_exact_mut(hw).zip(gout) {
                        chan.iter_mut().for_each(|g| *g += go / hw as f64);
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, gout)),
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|g| *g += gout[0])),
            Op::Concat { parts, axis } => {
                let base = self.shape(parts[0]);
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &gout[o * total + offset..o * total + offset + block];
                            add_into(&mut gp[o * block..(o + 1) * block], src);
                        }
                    });
                    offset += block;
                }
            }
            Op::MaxOverSet { inputs, argmax } => {
                for (t, &v) in inputs.iter().enumerate() {
                    acc(v, &mut |gv| {
                        for (j, &winner) in argmax.iter().enumerate() {
                            if winner == t {
                                gv[j] += gout[j];
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => acc(*logits, &mut |gl| {
                for (j, (g, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *label { 1.0 } else { 0.0 };
                    *g += gout[0] * (p - onehot);
                }
            }),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of a nonempty slice. The normalizer is summed in
/// sorted order, so permuting the input permutes the output bit-for-bit.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum = sorted_sum(exps.clone());
    exps.into_iter().map(|e| e / sum).collect()
}

/// Sum that does not depend on the order of its terms.
pub fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += av * bv);
        }
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * positions];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &input[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, grad_input: &mut [f64]) {
    let positions = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut grad_input[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
        assert_eq!(g.shape(c), &[2, 1]);

        let m = Tensor::matrix(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let i3 = g.constant(Tensor::identity(3));
        let mv = g.constant(m.clone());
        let out = g.matmul(i3, mv).unwrap();
        assert!(g.value(out).bit_eq(&m));

        assert!(matches!(g.matmul(a, mv), Err(Error::Shape(_))));
    }

    #[test]
    fn activations_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[0.0]));
        let s = g.sigmoid(x).unwrap();
        let t = g.tanh(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        assert_eq!(g.value(t).data(), &[0.0]);
        let half = g.constant(vec_t(&[0.5]));
        let s = g.sigmoid(half).unwrap();
        assert!((g.value(s).data()[0] - 1.0 / (1.0 + (-0.5f64).exp())).abs() < 1e-15);
        assert!((g.value(s).data()[0] - 0.622459).abs() < 1e-6);
    }

    #[test]
    fn hadamard_identity_and_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[1.5, -2.0, 3.0]));
        let ones = g.constant(vec_t(&[1.0, 1.0, 1.0]));
        let y = g.hadamard(x, ones).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let short = g.constant(vec_t(&[1.0, 1.0]));
        assert!(matches!(g.hadamard(x, short), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let c = g.constant(vec_t(&[3.7; 4]));
        let s = g.softmax(c).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let one = g.constant(vec_t(&[-12.0]));
        let s = g.softmax(one).unwrap();
        assert_eq!(g.value(s).data(), &[1.0]);
        let two = g.constant(vec_t(&[2.0, 0.0]));
        let s = g.softmax(two).unwrap();
        let e2 = 2f64.exp();
        assert!((g.value(s).data()[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((g.value(s).data()[0] - 0.880797).abs() < 1e-6);
        assert!((g.value(s).data()[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[1000.0, 999.0]));
        let s = g.softmax(x).unwrap();
        assert!((g.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_and_zero() {
        let mut g = Graph::new();
        let img = Tensor::new(&[1, 4, 5], (0..20).map(|v| v as f64 * 0.3 - 2.0).collect()).unwrap();
        let x = g.constant(img.clone());
        let k1 = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, k1, None, 1, 0).unwrap();
        assert!(g.value(y).bit_eq(&img));

        let kz = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        let y = g.conv2d(x, kz, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let big = g.constant(Tensor::zeros(&[1, 1, 7, 7]));
        assert!(matches!(g.conv2d(x, big, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_output_size_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 32, 32]));
        let k = g.constant(Tensor::zeros(&[8, 2, 3, 3]));
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 16, 16]);
    }

    #[test]
    fn concat_along_axes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = g.concat(a, b, 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert!(g.concat(a, b, 0).is_err());
    }

    #[test]
    fn max_over_set_examples() {
        let mut g = Graph::new();
        let a = g.constant(vec_t(&[1.0, -2.0]));
        let b = g.constant(vec_t(&[0.0, 5.0]));
        let m = g.max_over_set(&[a, b]).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 5.0]);
        let single = g.max_over_set(&[a]).unwrap();
        assert_eq!(g.value(single).data(), g.value(a).data());
        assert!(matches!(g.max_over_set(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn max_ties_route_gradient_to_lowest_index() {
        let mut g = Graph::new();
        let t0 = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let a = g.param(&t0);
        let b = g.param(&t0);
        let m = g.max_over_set(&[a, b]).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0, 1.0]);
        assert!(grads.get(b).is_none_or(|gb| gb.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(vec_t(&[0.3; 4]));
        let l = g.cross_entropy(uniform, 2).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!((g.value(l).data()[0] - 1.386294).abs() < 1e-6);

        let certain = g.constant(vec_t(&[0.0, 40.0, -3.0]));
        let l = g.cross_entropy(certain, 1).unwrap();
        assert!(g.value(l).data()[0] < 1e-12);
        assert!(g.value(l).data()[0] >= 0.0);

        assert!(matches!(g.cross_entropy(certain, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(&vec_t(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_is_rejected_at_op_boundary() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[1e200]));
        let err = g.scale(x, 1e200).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn frozen_graph_has_no_gradients() {
        let mut g = Graph::inference();
        let x = g.param(&vec_t(&[1.0, 2.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }
}
