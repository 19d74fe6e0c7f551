//! Parameter storage and the layer building blocks shared by the denoiser,
//! the refiner and the OCR classifier.

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Same layout, different element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> crate::Result<()> {
        if self.names != other.names {
            return Err(crate::Error::Archive("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.ensure_same_shape(src)?;
            dst.clone_from(src);
        }
        Ok(())
    }
}

/// Builder that prefixes parameter names and draws initial values.
pub struct Init<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Init<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn scoped<O>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_, T, R>) -> O) -> O {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut sub = Init { store: self.store, rng: self.rng, prefix };
        f(&mut sub)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::full(shape, T::from_f64(v)))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = self.full_name(name);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(self.rng.random_range(-bound..=bound))).collect();
        self.store.add(n, Tensor::new(shape, data).unwrap())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        init.scoped(name, |i| {
            let bound = (3.0 / (c_in * k * k) as f64).sqrt();
            let w = i.uniform("weight", &[c_out, c_in, k, k], bound);
            let b = i.constant("bias", &[c_out], 0.0);
            Conv2d { w, b, stride, pad: k / 2 }
        })
    }

    /// Same as [`Conv2d::new`] but with all-zero weights.
    pub fn zeros<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        init.scoped(name, |i| {
            let w = i.constant("weight", &[c_out, c_in, k, k], 0.0);
            let b = i.constant("bias", &[c_out], 0.0);
            Conv2d { w, b, stride: 1, pad: k / 2 }
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        init.scoped(name, |i| {
            let bound = (3.0 / fan_in as f64).sqrt();
            Linear { w: i.uniform("weight", &[fan_out, fan_in], bound), b: i.constant("bias", &[fan_out], 0.0) }
        })
    }

    pub fn zeros<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        init.scoped(name, |i| Linear {
            w: i.constant("weight", &[fan_out, fan_in], 0.0),
            b: i.constant("bias", &[fan_out], 0.0),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar, R: Rng>(init: &mut Init<'_, T, R>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        init.scoped(name, |i| GroupNorm {
            gamma: i.constant("gamma", &[channels], 1.0),
            beta: i.constant("beta", &[channels], 0.0),
            groups,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Pre-activation residual block with an additive per-channel conditioning
/// vector (timestep embedding) injected between the two convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    cond: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        cond_dim: Option<usize>,
        groups: usize,
    ) -> Self {
        init.scoped(name, |i| ResBlock {
            norm1: GroupNorm::new(i, "norm1", c_in, groups),
            conv1: Conv2d::new(i, "conv1", c_in, c_out, 3, 1),
            cond: cond_dim.map(|d| Linear::new(i, "cond", d, c_out)),
            norm2: GroupNorm::new(i, "norm2", c_out, groups),
            conv2: Conv2d::new(i, "conv2", c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(i, "skip", c_in, c_out, 1, 1)),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, cond: Option<Var>) -> Var {
        let h = self.norm1.forward(g, ps, x);
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, ps, h);
        if let (Some(lin), Some(c)) = (&self.cond, cond) {
            let c = g.silu(c);
            let c = lin.forward(g, ps, c);
            h = g.add_channel(h, c);
        }
        let h = self.norm2.forward(g, ps, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, ps, h);
        let s = match &self.skip {
            Some(conv) => conv.forward(g, ps, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Single-head scaled dot-product attention over the spatial positions of
/// one or two feature maps. Queries come from `q_src`, keys and values from
/// `kv_src`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub d_k: usize,
}

pub struct AttentionOutput {
    /// `[N, L_q, d_v]` attended features.
    pub attended: Var,
    /// `[N, L_q, L_kv]` row-stochastic attention weights.
    pub weights: Var,
}

impl SpatialAttention {
    pub fn new<T: Scalar, R: Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        c_q: usize,
        c_kv: usize,
        d_k: usize,
        d_v: usize,
    ) -> Self {
        init.scoped(name, |i| SpatialAttention {
            q: Linear::new(i, "q", c_q, d_k),
            k: Linear::new(i, "k", c_kv, d_k),
            v: Linear::new(i, "v", c_kv, d_v),
            d_k,
        })
    }

    /// Flatten `[N, C, H, W]` into a `[N, H*W, C]` sequence.
    pub fn flatten<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], s[2] * s[3]]);
        g.transpose_last2(r)
    }

    /// Inverse of [`SpatialAttention::flatten`].
    pub fn unflatten<T: Scalar>(g: &mut Graph<T>, seq: Var, h: usize, w: usize) -> Var {
        let t = g.transpose_last2(seq);
        let s = g.shape(t).to_vec();
        g.reshape(t, &[s[0], s[1], h, w])
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, q_seq: Var, kv_seq: Var) -> AttentionOutput {
        let q = self.q.forward(g, ps, q_seq);
        let k = self.k.forward(g, ps, kv_seq);
        let v = self.v.forward(g, ps, kv_seq);
        let kt = g.transpose_last2(k);
        let scores = g.batch_matmul(q, kt);
        let scores = g.scale(scores, T::from_f64(1.0 / (self.d_k as f64).sqrt()));
        let weights = g.softmax_last(scores);
        let attended = g.batch_matmul(weights, v);
        AttentionOutput { attended, weights }
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::ZERO; ts.len() * dim];
    for (row, &t) in data.chunks_mut(dim).zip(ts) {
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let a = t as f64 * freq;
            row[j] = T::from_f64(a.sin());
            row[half + j] = T::from_f64(a.cos());
        }
    }
    Tensor::new(&[ts.len(), dim], data).unwrap()
}
