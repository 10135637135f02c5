//! Parameters and the layers built on top of the tensor graph.
//!
//! Layers only hold [`ParamId`]s. Values live in a [`ParamStore`] and are
//! bound into a fresh [`Graph`] by a [`Scope`] for each forward pass, which
//! lets one layer definition run in `f32` (training) or `f64` (checks).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{GradCheckOptions, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.id_of(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies values for every name present in both stores; shapes must agree.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let Some(j) = other.id_of(name) else {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            };
            let src = other.get(j);
            if src.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Registers parameters with seeded initialization.
pub struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new() }
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.uniform(name, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
    }

    /// Uniform in `±bound`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let full = self.full_name(name);
        self.store.add(full, Tensor::from_f64(shape, &data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, Tensor::from_fn(shape, |_| T::from_f64(value)))
    }
}

/// One forward pass: a graph plus the parameter leaves bound into it.
///
/// Binding a parameter twice returns the same [`Var`], so layers reused on
/// two inputs share storage and accumulate into one gradient.
pub struct Scope<'p, T: Scalar = f32> {
    pub g: Graph<T>,
    store: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p, T: Scalar> Scope<'p, T> {
    /// With `track` unset, parameters enter as constants (inference).
    pub fn new(store: &'p ParamStore<T>, track: bool) -> Self {
        Self { g: Graph::new(), store, bound: vec![None; store.len()], track }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let mut t = self.store.get(id).clone();
        t.requires_grad = self.track;
        t.grad = None;
        let v = self.g.leaf(t);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient of parameter `id` after [`Graph::backward`]; zeros when the
    /// parameter was never reached.
    pub fn param_grad(&self, id: ParamId) -> Vec<T> {
        self.bound[id.0]
            .and_then(|v| self.g.grad(v).map(<[T]>::to_vec))
            .unwrap_or_else(|| vec![T::zero(); self.store.get(id).numel()])
    }

    pub fn param_grads(&self) -> Vec<Vec<T>> {
        self.store.ids().map(|id| self.param_grad(id)).collect()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    /// Absent for bias-free projections.
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::build(b, name, fan_in, fan_out, true)
    }

    pub fn without_bias<T: Scalar>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::build(b, name, fan_in, fan_out, false)
    }

    fn build<T: Scalar>(b: &mut Builder<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                w: b.glorot("w", &[fan_in, fan_out], fan_in, fan_out)?,
                b: if bias { Some(b.constant("b", &[fan_out], 0.0)?) } else { None },
                fan_in,
                fan_out,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gamma: b.constant("gamma", &[dim], 1.0)?,
                beta: b.constant("beta", &[dim], 0.0)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (s.param(self.gamma), s.param(self.beta));
        let y = s.g.layernorm(x)?;
        let y = s.g.mul_cols(y, gm)?;
        s.g.add_bias(y, bt)
    }
}

/// Linear layers with ReLU between them (and after the last when
/// `final_relu`).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dims: &[usize], final_relu: bool) -> Result<Self> {
        b.scoped(name, |b| {
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, d)| Linear::new(b, &format!("l{i}"), d[0], d[1]))
                .collect::<Result<_>>()?;
            Ok(Self { layers, final_relu })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(s, x)?;
            if i < last || self.final_relu {
                x = s.g.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Multi-head scaled dot-product attention with pre-normalization, output
/// projection and a residual connection to the queries.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub norm_q: LayerNorm,
    /// Separate normalization of the key/value source; `None` for self-attention.
    pub norm_kv: Option<LayerNorm>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize, cross: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        b.scoped(name, |b| {
            Ok(Self {
                heads,
                dim,
                norm_q: LayerNorm::new(b, "norm_q", dim)?,
                norm_kv: if cross { Some(LayerNorm::new(b, "norm_kv", dim)?) } else { None },
                q: Linear::new(b, "q", dim, dim)?,
                // a key bias shifts every score of a query equally and
                // cancels in the softmax
                k: Linear::without_bias(b, "k", dim, dim)?,
                v: Linear::new(b, "v", dim, dim)?,
                out: Linear::new(b, "out", dim, dim)?,
            })
        })
    }

    /// `queries[Nq×C]` attend to `keys_values[Nk×C]`; returns `[Nq×C]`.
    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, queries: Var, keys_values: Var) -> Result<Var> {
        for v in [queries, keys_values] {
            if s.g.shape(v).len() != 2 || s.g.shape(v)[1] != self.dim {
                return Err(Error::Shape(format!(
                    "attention expects [N×{}] tokens, got {:?}",
                    self.dim,
                    s.g.shape(v)
                )));
            }
        }
        let qn = self.norm_q.forward(s, queries)?;
        let kvn = match &self.norm_kv {
            Some(n) => n.forward(s, keys_values)?,
            None if keys_values == queries => qn,
            None => self.norm_q.forward(s, keys_values)?,
        };
        let q = self.q.forward(s, qn)?;
        let k = self.k.forward(s, kvn)?;
        let v = self.v.forward(s, kvn)?;
        let merged = s.g.attention(q, k, v, self.heads)?;
        let projected = self.out.forward(s, merged)?;
        s.g.add(queries, projected)
    }
}

/// Attention followed by a pre-normalized `C → 4C → C` ReLU feed-forward,
/// each with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: Mlp,
}

impl AttentionBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, dim: usize, heads: usize, cross: bool) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                attn: MultiHeadAttention::new(b, "attn", dim, heads, cross)?,
                norm_ff: LayerNorm::new(b, "norm_ff", dim)?,
                ff: Mlp::new(b, "ff", &[dim, 4 * dim, dim], false)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, queries: Var, keys_values: Var) -> Result<Var> {
        let x = self.attn.forward(s, queries, keys_values)?;
        let h = self.norm_ff.forward(s, x)?;
        let h = self.ff.forward(s, h)?;
        s.g.add(x, h)
    }

    pub fn forward_self<T: Scalar>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        self.forward(s, x, x)
    }
}

/// Same-padded 2D convolution with bias over `[H×W×C]` maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, kernel: usize, cin: usize, cout: usize) -> Result<Self> {
        Self::with_bias(b, name, kernel, cin, cout, 0.0)
    }

    /// As [`Conv2d::new`] with every bias entry set to `bias`.
    pub fn with_bias<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        bias: f64,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!("kernel size {kernel} must be odd")));
        }
        b.scoped(name, |b| {
            let fan_in = kernel * kernel * cin;
            let fan_out = kernel * kernel * cout;
            Ok(Self {
                w: b.glorot("w", &[kernel, kernel, cin, cout], fan_in, fan_out)?,
                b: b.constant("b", &[cout], bias)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Scope<T>, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        let y = s.g.conv2d(x, w)?;
        s.g.add_bias(y, b)
    }
}

/// Finite-difference check of a scalar model function over every parameter
/// of `store` and every tensor in `inputs`. Returns the largest relative error.
pub fn grad_check_params<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: GradCheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Scope<f64>, &[Var]) -> Result<Var>,
{
    let eval = |st: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut s = Scope::new(st, false);
        let vars: Vec<Var> = xs.iter().map(|t| s.input(t.clone())).collect();
        let out = f(&mut s, &vars)?;
        Ok(s.g.value(out).item())
    };

    let mut s = Scope::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| s.g.leaf(t.clone().with_grad())).collect();
    let out = f(&mut s, &vars)?;
    s.g.backward(out)?;
    let pgrads = s.param_grads();
    let igrads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| s.g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut worst: f64 = 0.0;
    let mut work = store.clone();
    for id in store.ids() {
        for e in crate::tensor::gradcheck_sampled(store.get(id).numel(), opts.max_elements) {
            let orig = store.get(id).data()[e];
            let err = crate::tensor::element_error(pgrads[id.0][e], &opts, |d| {
                work.get_mut(id).data_mut()[e] = orig + d;
                eval(&work, inputs)
            })?;
            work.get_mut(id).data_mut()[e] = orig;
            worst = worst.max(err);
        }
    }
    let mut xs = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in crate::tensor::gradcheck_sampled(t.numel(), opts.max_elements) {
            let orig = t.data()[e];
            let err = crate::tensor::element_error(igrads[ti][e], &opts, |d| {
                xs[ti].data_mut()[e] = orig + d;
                eval(store, &xs)
            })?;
            xs[ti].data_mut()[e] = orig;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
