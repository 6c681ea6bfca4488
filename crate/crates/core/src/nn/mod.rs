//! Parameter storage and the small set of layers the models are built from.

mod adam;

pub use adam::{clip_global_norm, global_norm, Adam, AdamState};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LayerTrace, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

pub type ParamId = usize;

/// Named parameter tensors owned by one model.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.tensors.iter().enumerate()
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Replaces every tensor with the same-named tensor from `values`; shapes
    /// must match exactly.
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor<T>>) -> Result<(), String> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| format!("missing parameter `{name}`"))?;
            if src.shape != t.shape {
                return Err(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape, t.shape
                ));
            }
            t.data.clone_from(&src.data);
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    None,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Relu => g.relu(x),
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Activation::None => "None",
            Activation::Relu => "ReLU",
            Activation::Elu => "ELU",
            Activation::Tanh => "tanh",
        }
    }
}

/// Records a layer in the graph's trace when tracing is enabled. The part of
/// the parameter name before the first `.` is the model, the rest the layer.
#[allow(clippy::too_many_arguments)]
fn trace<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: ParamId,
    inputs: &[Var],
    output: Var,
    act: &str,
    conv: Option<(usize, usize, usize)>,
) {
    if !g.tracing() {
        return;
    }
    let full = store.name(w).trim_end_matches(".w").trim_end_matches(".wx");
    let (model, layer) = full.split_once('.').unwrap_or((full, ""));
    let shape = |g: &Graph<T>, v: Var| g.shape(v)[1..].to_vec();
    let row = LayerTrace {
        model: model.to_string(),
        layer: layer.to_string(),
        inputs: inputs.iter().map(|&v| shape(g, v)).collect(),
        outputs: vec![shape(g, output)],
        activation: act.to_string(),
        kernel: conv.map(|c| c.0),
        stride: conv.map(|c| c.1),
        padding: conv.map(|c| c.2),
    };
    g.record(row);
}

/// Glorot-uniform initialized tensor.
pub fn glorot<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::c(rng.gen_range(-limit..limit))).collect())
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(&[in_dim, out_dim], in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim, act }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.linear(x, w, b);
        let y = self.act.apply(g, y);
        trace(g, store, self.w, &[x], y, self.act.label(), None);
        y
    }
}

/// Stack of dense layers: hidden layers share one activation, the output
/// layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        Self::with_output(store, name, in_dim, hidden, depth, out_dim, act, Activation::None, rng)
    }

    /// Like [`Mlp::new`] with an activation on the output layer.
    #[allow(clippy::too_many_arguments)]
    pub fn with_output<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        depth: usize,
        out_dim: usize,
        act: Activation,
        out_act: Activation,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut d = in_dim;
        for i in 0..depth {
            layers.push(Dense::new(store, &format!("{name}.fc{}", i + 1), d, hidden, act, rng));
            d = hidden;
        }
        layers.push(Dense::new(store, &format!("{name}.fc{}", depth + 1), d, out_dim, out_act, rng));
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.layers.iter().fold(x, |h, l| l.forward(g, store, h))
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub act: Activation,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let kdim = kernel * kernel * in_c;
        let w = store.add(format!("{name}.w"), glorot(&[kdim, out_c], kdim, kernel * kernel * out_c, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_c]));
        Self { w, b, in_c, out_c, kernel, stride, act }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, b, self.kernel, self.stride);
        let y = self.act.apply(g, y);
        trace(g, store, self.w, &[x], y, self.act.label(), Some((self.kernel, self.stride, 0)));
        y
    }
}

#[derive(Clone, Debug)]
pub struct Deconv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_pad: usize,
    pub act: Activation,
}

impl Deconv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        out_pad: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let kdim = kernel * kernel * out_c;
        let w = store.add(format!("{name}.w"), glorot(&[in_c, kdim], kernel * kernel * in_c, kdim, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_c]));
        Self { w, b, in_c, out_c, kernel, stride, out_pad, act }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.deconv2d(x, w, b, self.kernel, self.stride, self.out_pad);
        let y = self.act.apply(g, y);
        trace(g, store, self.w, &[x], y, self.act.label(), Some((self.kernel, self.stride, self.out_pad)));
        y
    }
}

/// Gated recurrent unit:
/// `r = σ(x Wr + h Ur + br)`, `u = σ(x Wu + h Uu + bu)`,
/// `n = tanh(x Wn + bn + r ⊙ (h Un + cn))`, `h' = (1 - u) ⊙ n + u ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = store.add(format!("{name}.wx"), glorot(&[in_dim, 3 * hidden], in_dim, hidden, rng));
        let wh = store.add(format!("{name}.wh"), glorot(&[hidden, 3 * hidden], hidden, hidden, rng));
        let bx = store.add(format!("{name}.bx"), Tensor::zeros(&[3 * hidden]));
        let bh = store.add(format!("{name}.bh"), Tensor::zeros(&[3 * hidden]));
        Self { wx, wh, bx, bh, in_dim, hidden }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h: Var) -> Var {
        let n = self.hidden;
        let (wx, bx) = (g.param(store, self.wx), g.param(store, self.bx));
        let (wh, bh) = (g.param(store, self.wh), g.param(store, self.bh));
        let gx = g.linear(x, wx, bx);
        let gh = g.linear(h, wh, bh);
        let xr = g.slice_cols(gx, 0, n);
        let xu = g.slice_cols(gx, n, n);
        let xn = g.slice_cols(gx, 2 * n, n);
        let hr = g.slice_cols(gh, 0, n);
        let hu = g.slice_cols(gh, n, n);
        let hn = g.slice_cols(gh, 2 * n, n);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let u_pre = g.add(xu, hu);
        let u = g.sigmoid(u_pre);
        let rh = g.mul(r, hn);
        let n_pre = g.add(xn, rh);
        let cand = g.tanh(n_pre);
        // h' = n + u ⊙ (h - n)
        let diff = g.sub(h, cand);
        let gated = g.mul(u, diff);
        let out = g.add(cand, gated);
        trace(g, store, self.wx, &[x, h], out, Activation::Tanh.label(), None);
        out
    }
}
