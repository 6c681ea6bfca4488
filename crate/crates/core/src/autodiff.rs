//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar output with respect to every node that requires one.
//! Graphs are single-use: build one per forward pass and drop it afterwards.

use std::collections::{HashMap, HashSet};

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Elu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    Recip,
    Square,
    Neg,
}

/// Geometry of a valid-padding 2-D convolution (or its transpose) in NHWC layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn conv(batch: usize, in_hwc: [usize; 3], out_c: usize, kernel: usize, stride: usize) -> Self {
        let [in_h, in_w, in_c] = in_hwc;
        assert!(in_h >= kernel && in_w >= kernel, "kernel larger than input");
        Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
            out_c,
            kernel,
            stride,
        }
    }

    /// Transposed convolution; `out_pad` extra rows/columns are appended on the
    /// bottom/right edge and only receive the bias.
    pub fn deconv(batch: usize, in_hwc: [usize; 3], out_c: usize, kernel: usize, stride: usize, out_pad: usize) -> Self {
        let [in_h, in_w, in_c] = in_hwc;
        Self {
            batch,
            in_h,
            in_w,
            in_c,
            out_h: (in_h - 1) * stride + kernel + out_pad,
            out_w: (in_w - 1) * stride + kernel + out_pad,
            out_c,
            kernel,
            stride,
        }
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Shift(Var),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Unary(Var, Unary),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    SumAll(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Deconv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One row of a recorded layer trace, used to check network shapes against an
/// architecture table. Dimensions exclude the batch axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    pub model: String,
    pub layer: String,
    pub inputs: Vec<Vec<usize>>,
    pub outputs: Vec<Vec<usize>>,
    pub activation: String,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, ParamId), Var>,
    frozen: HashSet<u64>,
    trace: Option<Vec<LayerTrace>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
            trace: None,
        }
    }

    pub fn with_trace() -> Self {
        let mut g = Self::new();
        g.trace = Some(Vec::new());
        g
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record(&mut self, row: LayerTrace) {
        if let Some(t) = self.trace.as_mut() {
            t.push(row);
        }
    }

    pub fn take_trace(&mut self) -> Vec<LayerTrace> {
        self.trace.take().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant input: no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Parameters of `store` are bound as constants from now on.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.id());
    }

    /// Binds a parameter tensor, reusing the node if it was bound before.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.id(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.id());
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(key, v);
        v
    }

    /// Gradients for every parameter of `store` (zeros for unused ones).
    pub fn param_grads(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, t)| {
                let g = self
                    .params
                    .get(&(store.id(), id))
                    .and_then(|&v| grads.wrt(v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); t.len()]);
                Tensor::new(t.shape.clone(), g)
            })
            .collect()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., n] + b[n]`, broadcasting over leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[b.0].value;
        let n = vb.len();
        assert_eq!(vx.cols(), n, "bias width mismatch");
        let mut data = vx.data.clone();
        for row in data.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&vb.data) {
                *o += bb;
            }
        }
        let t = Tensor::new(vx.shape.clone(), data);
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| x * c).collect());
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| x + c).collect());
        let rg = self.rg(a);
        self.push(t, Op::Shift(a), rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let va = &self.nodes[a.0].value;
        let one = T::one();
        let f = |x: T| -> T {
            match kind {
                Unary::Relu => x.max(T::zero()),
                Unary::Elu => {
                    if x > T::zero() {
                        x
                    } else {
                        x.exp_m1()
                    }
                }
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => one / (one + (-x).exp()),
                Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
                Unary::Exp => x.exp(),
                Unary::Ln => x.ln(),
                Unary::Recip => one / x,
                Unary::Square => x * x,
                Unary::Neg => -x,
            }
        };
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        let rg = self.rg(a);
        self.push(t, Op::Unary(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Elu)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }
    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Neg)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(vb.shape.len(), 2);
        let (k, n) = (vb.shape[0], vb.shape[1]);
        assert_eq!(va.cols(), k, "matmul inner dimension mismatch");
        let m = va.rows();
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, n, k, T::one(), &va.data, &vb.data, T::zero(), &mut out);
        let mut shape = va.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::MatMul(a, b), rg)
    }

    /// Fused `x w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (k, n) = (vw.shape[0], vw.shape[1]);
        assert_eq!(vx.cols(), k, "linear input width {} != {}", vx.cols(), k);
        assert_eq!(vb.len(), n);
        let m = vx.rows();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&vb.data);
        }
        T::gemm(false, false, m, n, k, T::one(), &vx.data, &vw.data, T::one(), &mut out);
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(shape, out), Op::Linear(x, w, b), rg)
    }

    /// Concatenates along the last axis; all inputs share leading dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.0].value;
                assert_eq!(v.rows(), rows, "concat row mismatch");
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = self.nodes[parts[0].0].value.shape.clone();
        *shape.last_mut().unwrap() = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let c = va.cols();
        assert!(start + len <= c, "column slice out of range");
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data[r * c + start..r * c + start + len]);
        }
        let mut shape = va.shape.clone();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::SliceCols(a, start), rg)
    }

    /// Stacks along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail: Vec<usize> = self.nodes[parts[0].0].value.shape[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(&v.shape[1..], &tail[..], "concat_rows trailing shape mismatch");
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Entries `start..start + len` of the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let stride: usize = va.shape[1..].iter().product();
        assert!(start + len <= va.shape[0], "row slice out of range");
        let data = va.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = va.shape.clone();
        shape[0] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::SliceRows(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let t = Tensor::new(shape.to_vec(), va.data.clone());
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data.iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![1], vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Valid-padding convolution. `x` is `[N, H, W, C]`, `w` is
    /// `[k * k * in_c, out_c]` with rows ordered `(ky, kx, ci)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        assert_eq!(vx.shape.len(), 4, "conv2d expects NHWC input");
        let geom = ConvGeom::conv(
            vx.shape[0],
            [vx.shape[1], vx.shape[2], vx.shape[3]],
            vw.shape[1],
            kernel,
            stride,
        );
        let kdim = geom.patch() * geom.in_c;
        assert_eq!(vw.shape[0], kdim, "conv2d weight rows mismatch");
        let rows = geom.batch * geom.out_h * geom.out_w;
        let cols = im2col(&vx.data, &geom);
        let mut out = Vec::with_capacity(rows * geom.out_c);
        let vb = &self.nodes[b.0].value;
        for _ in 0..rows {
            out.extend_from_slice(&vb.data);
        }
        T::gemm(false, false, rows, geom.out_c, kdim, T::one(), &cols, &vw.data, T::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        let saved = if rg { cols } else { Vec::new() };
        self.push(Tensor::new(shape, out), Op::Conv2d { x, w, b, geom, cols: saved }, rg)
    }

    /// Transposed convolution. `x` is `[N, H, W, C]`, `w` is
    /// `[in_c, k * k * out_c]` with columns ordered `(ky, kx, co)`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize, out_pad: usize) -> Var {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        assert_eq!(vx.shape.len(), 4, "deconv2d expects NHWC input");
        let in_c = vx.shape[3];
        assert_eq!(vw.shape[0], in_c, "deconv2d weight rows mismatch");
        let out_c = vw.shape[1] / (kernel * kernel);
        let geom = ConvGeom::deconv(vx.shape[0], [vx.shape[1], vx.shape[2], in_c], out_c, kernel, stride, out_pad);
        let rows = geom.batch * geom.in_h * geom.in_w;
        let kdim = geom.patch() * out_c;
        let mut cols = vec![T::zero(); rows * kdim];
        T::gemm(false, false, rows, kdim, in_c, T::one(), &vx.data, &vw.data, T::zero(), &mut cols);
        let mut out = vec![T::zero(); geom.batch * geom.out_h * geom.out_w * out_c];
        col2im_deconv(&cols, &geom, &mut out);
        let vb = &self.nodes[b.0].value;
        for px in out.chunks_mut(out_c) {
            for (o, &bb) in px.iter_mut().zip(&vb.data) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let shape = vec![geom.batch, geom.out_h, geom.out_w, out_c];
        self.push(Tensor::new(shape, out), Op::Deconv2d { x, w, b, geom }, rg)
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.nodes[output.0].value.len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                    if self.rg(v) {
                        let acc = accumulate(grads, v, g.len());
                        acc.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if self.rg(v) {
                        let acc = accumulate(grads, v, g.len());
                        acc.iter_mut().zip(g).for_each(|(o, &x)| *o += sign * x);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let other = &val(*b).data;
                    let acc = accumulate(grads, *a, g.len());
                    for ((o, &x), &y) in acc.iter_mut().zip(g).zip(other) {
                        *o += x * y;
                    }
                }
                if self.rg(*b) {
                    let other = &val(*a).data;
                    let acc = accumulate(grads, *b, g.len());
                    for ((o, &x), &y) in acc.iter_mut().zip(g).zip(other) {
                        *o += x * y;
                    }
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if self.rg(*b) {
                    let n = val(*b).len();
                    let acc = accumulate(grads, *b, n);
                    for row in g.chunks(n) {
                        acc.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let acc = accumulate(grads, *a, g.len());
                    acc.iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if self.rg(*a) {
                    let acc = accumulate(grads, *a, g.len());
                    acc.iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::Unary(a, kind) => {
                if !self.rg(*a) {
                    return;
                }
                let x = &val(*a).data;
                let y = &node.value.data;
                let one = T::one();
                let two = T::c(2.0);
                let acc = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if x[i] > T::zero() {
                                one
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Elu => {
                            if x[i] > T::zero() {
                                one
                            } else {
                                y[i] + one
                            }
                        }
                        Unary::Tanh => one - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (one - y[i]),
                        Unary::Softplus => one / (one + (-x[i]).exp()),
                        Unary::Exp => y[i],
                        Unary::Ln => one / x[i],
                        Unary::Recip => -(y[i] * y[i]),
                        Unary::Square => two * x[i],
                        Unary::Neg => -one,
                    };
                    acc[i] += g[i] * d;
                }
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, None, g, grads),
            Op::Linear(x, w, b) => self.backprop_matmul(*x, *w, Some(*b), g, grads),
            Op::Concat(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.rg(*p) {
                        let acc = accumulate(grads, *p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            acc[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(o, &v)| *o += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.rg(*a) {
                    let va = val(*a);
                    let (c, len) = (va.cols(), node.value.cols());
                    let acc = accumulate(grads, *a, va.len());
                    for r in 0..va.rows() {
                        acc[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(&g[r * len..(r + 1) * len])
                            .for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = val(*p).len();
                    if self.rg(*p) {
                        let acc = accumulate(grads, *p, n);
                        acc.iter_mut().zip(&g[offset..offset + n]).for_each(|(o, &v)| *o += v);
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                if self.rg(*a) {
                    let va = val(*a);
                    let stride: usize = va.shape[1..].iter().product();
                    let acc = accumulate(grads, *a, va.len());
                    acc[start * stride..start * stride + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(o, &v)| *o += v);
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let n = val(*a).len();
                    let acc = accumulate(grads, *a, n);
                    acc.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.batch * geom.out_h * geom.out_w;
                let kdim = geom.patch() * geom.in_c;
                if self.rg(*b) {
                    let acc = accumulate(grads, *b, geom.out_c);
                    for row in g.chunks(geom.out_c) {
                        acc.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
                if self.rg(*w) {
                    let acc = accumulate(grads, *w, kdim * geom.out_c);
                    T::gemm(true, false, kdim, geom.out_c, rows, T::one(), cols, g, T::one(), acc);
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::zero(); rows * kdim];
                    T::gemm(false, true, rows, kdim, geom.out_c, T::one(), g, &val(*w).data, T::zero(), &mut dcols);
                    let acc = accumulate(grads, *x, val(*x).len());
                    col2im(&dcols, geom, acc);
                }
            }
            Op::Deconv2d { x, w, b, geom } => {
                let rows = geom.batch * geom.in_h * geom.in_w;
                let kdim = geom.patch() * geom.out_c;
                if self.rg(*b) {
                    let acc = accumulate(grads, *b, geom.out_c);
                    for px in g.chunks(geom.out_c) {
                        acc.iter_mut().zip(px).for_each(|(o, &v)| *o += v);
                    }
                }
                if !(self.rg(*w) || self.rg(*x)) {
                    return;
                }
                let dcols = im2col_deconv(g, geom);
                if self.rg(*w) {
                    let acc = accumulate(grads, *w, geom.in_c * kdim);
                    T::gemm(true, false, geom.in_c, kdim, rows, T::one(), &val(*x).data, &dcols, T::one(), acc);
                }
                if self.rg(*x) {
                    let acc = accumulate(grads, *x, rows * geom.in_c);
                    T::gemm(false, true, rows, geom.in_c, kdim, T::one(), &dcols, &val(*w).data, T::one(), acc);
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, w: Var, b: Option<Var>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let va = &self.nodes[a.0].value;
        let vw = &self.nodes[w.0].value;
        let (k, n) = (vw.shape[0], vw.shape[1]);
        let m = va.rows();
        if let Some(b) = b {
            if self.rg(b) {
                let acc = accumulate(grads, b, n);
                for row in g.chunks(n) {
                    acc.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                }
            }
        }
        if self.rg(w) {
            let acc = accumulate(grads, w, k * n);
            T::gemm(true, false, k, n, m, T::one(), &va.data, g, T::one(), acc);
        }
        if self.rg(a) {
            let acc = accumulate(grads, a, m * k);
            T::gemm(false, true, m, k, n, T::one(), g, &vw.data, T::one(), acc);
        }
    }
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let k = geom.kernel;
    let kdim = k * k * geom.in_c;
    let mut cols = Vec::with_capacity(geom.batch * geom.out_h * geom.out_w * kdim);
    for n in 0..geom.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                for ky in 0..k {
                    let iy = oy * geom.stride + ky;
                    let base = ((n * geom.in_h + iy) * geom.in_w + ox * geom.stride) * geom.in_c;
                    cols.extend_from_slice(&x[base..base + k * geom.in_c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], geom: &ConvGeom, dx: &mut [T]) {
    let k = geom.kernel;
    let kdim = k * k * geom.in_c;
    let span = k * geom.in_c;
    let mut r = 0;
    for n in 0..geom.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let row = &dcols[r * kdim..(r + 1) * kdim];
                for ky in 0..k {
                    let iy = oy * geom.stride + ky;
                    let base = ((n * geom.in_h + iy) * geom.in_w + ox * geom.stride) * geom.in_c;
                    dx[base..base + span]
                        .iter_mut()
                        .zip(&row[ky * span..(ky + 1) * span])
                        .for_each(|(o, &v)| *o += v);
                }
                r += 1;
            }
        }
    }
}

fn col2im_deconv<T: Scalar>(cols: &[T], geom: &ConvGeom, out: &mut [T]) {
    let k = geom.kernel;
    let span = k * geom.out_c;
    let kdim = k * span;
    let mut r = 0;
    for n in 0..geom.batch {
        for iy in 0..geom.in_h {
            for ix in 0..geom.in_w {
                let row = &cols[r * kdim..(r + 1) * kdim];
                for ky in 0..k {
                    let oy = iy * geom.stride + ky;
                    let base = ((n * geom.out_h + oy) * geom.out_w + ix * geom.stride) * geom.out_c;
                    out[base..base + span]
                        .iter_mut()
                        .zip(&row[ky * span..(ky + 1) * span])
                        .for_each(|(o, &v)| *o += v);
                }
                r += 1;
            }
        }
    }
}

fn im2col_deconv<T: Scalar>(g: &[T], geom: &ConvGeom) -> Vec<T> {
    let k = geom.kernel;
    let span = k * geom.out_c;
    let mut cols = Vec::with_capacity(geom.batch * geom.in_h * geom.in_w * k * span);
    for n in 0..geom.batch {
        for iy in 0..geom.in_h {
            for ix in 0..geom.in_w {
                for ky in 0..k {
                    let oy = iy * geom.stride + ky;
                    let base = ((n * geom.out_h + oy) * geom.out_w + ix * geom.stride) * geom.out_c;
                    cols.extend_from_slice(&g[base..base + span]);
                }
            }
        }
    }
    cols
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(inputs) for a graph builder.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).map(|s| s.to_vec()).unwrap_or(vec![0.0; t.len()]);
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut t = t.clone();
                            if k == i {
                                t.data[j] += delta;
                            }
                            g.input(t)
                        })
                        .collect();
                    let o = build(&mut g, &vs);
                    g.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let err = (numeric - analytic[j]).abs() / numeric.abs().max(analytic[j].abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} elem {j}: numeric {numeric} analytic {}", analytic[j]);
            }
        }
    }

    #[test]
    fn elementwise_and_unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        check(vec![a, b], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let e = g.elu(s);
            let t = g.tanh(e);
            let sp = g.softplus(v[0]);
            let sg = g.sigmoid(sp);
            let ex = g.exp(sg);
            let l = g.ln(ex);
            let l1 = g.add_scalar(l, 1.5);
            let r = g.recip(l1);
            let q = g.square(r);
            let n = g.neg(q);
            let all = g.add(t, n);
            let sc = g.scale(all, 0.7);
            g.sum(sc)
        });
    }

    #[test]
    fn relu_gradient_away_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = rand_tensor(&[4, 5], &mut rng);
        a.data.iter_mut().for_each(|x| *x += 0.1 * x.signum());
        let w = rand_tensor(&[4, 5], &mut rng);
        check(vec![a, w], |g, v| {
            let r = g.relu(v[0]);
            let m = g.mul(r, v[1]);
            g.sum(m)
        });
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[4, 3], &mut rng);
        let w = rand_tensor(&[3, 5], &mut rng);
        let b = rand_tensor(&[5], &mut rng);
        check(vec![x, w, b], |g, v| {
            let l = g.linear(v[0], v[1], v[2]);
            let m = g.matmul(v[0], v[1]);
            let mb = g.add_bias(m, v[2]);
            let c = g.concat(&[l, mb, v[0]]);
            let s = g.slice_cols(c, 2, 7);
            let r = g.concat_rows(&[s, s]);
            let rs = g.slice_rows(r, 1, 5);
            let sh = g.reshape(rs, &[5, 7]);
            let sq = g.square(sh);
            g.mean(sq)
        });
    }

    #[test]
    fn conv_and_deconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[2, 7, 7, 2], &mut rng);
        let w = rand_tensor(&[3 * 3 * 2, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let wd = rand_tensor(&[3, 2 * 2 * 2], &mut rng);
        let bd = rand_tensor(&[2], &mut rng);
        check(vec![x, w, b, wd, bd], |g, v| {
            let c = g.conv2d(v[0], v[1], v[2], 3, 2);
            let t = g.tanh(c);
            let d = g.deconv2d(t, v[3], v[4], 2, 3, 1);
            let sq = g.square(d);
            g.sum(sq)
        });
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[1, 6, 5, 2], &mut rng);
        let w = rand_tensor(&[2 * 2 * 2, 3], &mut rng);
        let b = Tensor::zeros(&[3]);
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b));
        let y = g.conv2d(vx, vw, vb, 2, 2);
        let out = g.value(y);
        assert_eq!(out.shape, vec![1, 3, 2, 3]);
        for oy in 0..3 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut s = 0.0;
                    for ky in 0..2 {
                        for kx in 0..2 {
                            for ci in 0..2 {
                                let xi = ((oy * 2 + ky) * 5 + ox * 2 + kx) * 2 + ci;
                                let wi = ((ky * 2 + kx) * 2 + ci) * 3 + co;
                                s += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    let got = out.data[(oy * 2 + ox) * 3 + co];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deconv_output_size_and_padding_rows_hold_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 13, 13, 2], 1.0));
        let w = g.constant(Tensor::full(&[2, 6 * 6 * 1], 0.0));
        let b = g.constant(Tensor::full(&[1], 0.25));
        let y = g.deconv2d(x, w, b, 6, 2, 1);
        assert_eq!(g.shape(y), &[1, 31, 31, 1]);
        assert!(g.value(y).data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn softplus_of_large_negative_is_exactly_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2], vec![-1e4, -200.0]));
        let y = g.softplus(x);
        assert_eq!(g.value(y).data, vec![0.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[2], 1.0));
        let b = g.input(Tensor::full(&[2], 2.0));
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.wrt(a).is_none());
        assert_eq!(grads.wrt(b).unwrap(), &[1.0, 1.0]);
    }
}
