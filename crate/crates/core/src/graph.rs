//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves bound to a [`ParamStore`] slot, so after [`Graph::backward`] the
//! gradient of each parameter can be collected in store order.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom, DeformGeom};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T: Scalar> {
    Leaf,
    Param,
    Add(Var, Var),
    /// `[N, C, ...] + [N, C]` broadcast over trailing axes.
    AddChannel(Var, Var),
    /// `x * (1 + scale) + shift` with `[N, C]` scale/shift.
    Film { x: Var, scale: Var, shift: Var },
    Scale(Var, T),
    /// Multiply every sample `n` by `coef[n]`.
    ScalePerSample(Var, Vec<T>),
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<T>, rstds: Vec<T> },
    Upsample2(Var),
    ConcatChannels(Var, Var),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Reshape(Var),
    TransposeLast2(Var),
    BatchMatmul(Var, Var),
    SoftmaxLast(Var),
    DeformConv { x: Var, offsets: Var, w: Var, b: Option<Var>, geom: DeformGeom },
    MseLoss { pred: Var, target: Tensor<T> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    OffsetLoss(Var),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every store parameter, zero for parameters that did not
    /// take part in the forward pass.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .ids()
            .map(|id| match self.params.get(&id).and_then(|v| self.grads[v.0].as_ref()) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(id).shape()),
            })
            .collect()
    }
}

fn silu<T: Scalar>(v: T) -> T {
    v / (T::ONE + (-v).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add: shape mismatch");
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -T::ONE);
        self.add(a, nb)
    }

    pub fn add_channel(&mut self, x: Var, c: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(c));
        let (n, ch) = (xv.dim(0), xv.dim(1));
        assert_eq!(cv.shape(), &[n, ch], "add_channel: bias shape");
        let inner = xv.numel() / (n * ch);
        let mut out = xv.clone();
        for (j, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let b = cv.data()[j];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        self.push(out, Op::AddChannel(x, c))
    }

    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(shift));
        let (n, ch) = (xv.dim(0), xv.dim(1));
        assert_eq!(sv.shape(), &[n, ch], "film: scale shape");
        assert_eq!(bv.shape(), &[n, ch], "film: shift shape");
        let inner = xv.numel() / (n * ch);
        let mut out = xv.clone();
        for (j, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let (s, b) = (T::ONE + sv.data()[j], bv.data()[j]);
            chunk.iter_mut().for_each(|v| *v = *v * s + b);
        }
        self.push(out, Op::Film { x, scale, shift })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn scale_per_sample(&mut self, x: Var, coef: Vec<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(0), coef.len(), "scale_per_sample: batch size");
        let inner = xv.numel() / coef.len();
        let mut out = xv.clone();
        for (chunk, &c) in out.data_mut().chunks_mut(inner).zip(&coef) {
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        self.push(out, Op::ScalePerSample(x, coef))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        self.push(out, Op::Silu(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 4, "conv2d: input must be NCHW");
        assert_eq!(xv.dim(1), wv.dim(1), "conv2d: channel mismatch");
        let geom = ConvGeom {
            c_in: xv.dim(1),
            h: xv.dim(2),
            w: xv.dim(3),
            c_out: wv.dim(0),
            kh: wv.dim(2),
            kw: wv.dim(3),
            stride,
            pad,
        };
        let n = xv.dim(0);
        let bias = b.map(|b| self.value(b).data());
        let data = kernels::conv2d_forward(xv.data(), n, &geom, wv.data(), bias);
        let out = Tensor::new(&[n, geom.c_out, geom.out_h(), geom.out_w()], data).unwrap();
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        assert_eq!(c % groups, 0, "group_norm: groups must divide channels");
        let hw = xv.numel() / (n * c);
        let (data, means, rstds) = kernels::group_norm_forward(
            xv.data(),
            n,
            c,
            hw,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(xv.shape(), data).unwrap();
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, means, rstds })
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2(x))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.dim(0);
        assert_eq!(n, bv.dim(0), "concat: batch");
        assert_eq!(av.shape()[2..], bv.shape()[2..], "concat: spatial");
        let (sa, sb) = (av.numel() / n, bv.numel() / n);
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&bv.data()[i * sb..(i + 1) * sb]);
        }
        let mut shape = av.shape().to_vec();
        shape[1] += bv.dim(1);
        self.push(Tensor::new(&shape, data).unwrap(), Op::ConcatChannels(a, b))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = (xv.dim(0), xv.dim(1));
        let hw = xv.numel() / (n * c);
        let inv = T::from_f64(1.0 / hw as f64);
        let data = xv
            .data()
            .chunks(hw)
            .map(|ch| {
                let mut s = T::ZERO;
                ch.iter().for_each(|&v| s += v);
                s * inv
            })
            .collect();
        self.push(Tensor::new(&[n, c], data).unwrap(), Op::GlobalAvgPool(x))
    }

    /// `x[..., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (out_f, in_f) = (wv.dim(0), wv.dim(1));
        assert_eq!(*xv.shape().last().unwrap(), in_f, "linear: feature mismatch");
        let m = xv.numel() / in_f;
        let mut data = vec![T::ZERO; m * out_f];
        let beta = if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(out_f) {
                row.copy_from_slice(bv);
            }
            T::ONE
        } else {
            T::ZERO
        };
        T::gemm(
            m, in_f, out_f, T::ONE, xv.data(), in_f as isize, 1, wv.data(), 1, in_f as isize,
            beta, &mut data, out_f as isize, 1,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        self.push(Tensor::new(&shape, data).unwrap(), Op::Linear { x, w, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape).expect("reshape: element count");
        self.push(out, Op::Reshape(x))
    }

    /// `[B, M, N] -> [B, N, M]`.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let out = transpose_last2(self.value(x));
        self.push(out, Op::TransposeLast2(x))
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (bs, m, k) = (av.dim(0), av.dim(1), av.dim(2));
        assert_eq!(bv.dim(0), bs, "bmm: batch");
        assert_eq!(bv.dim(1), k, "bmm: inner");
        let n = bv.dim(2);
        let mut data = vec![T::ZERO; bs * m * n];
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                T::ONE,
                &av.data()[i * m * k..],
                k as isize,
                1,
                &bv.data()[i * k * n..],
                n as isize,
                1,
                T::ZERO,
                &mut data[i * m * n..],
                n as isize,
                1,
            );
        }
        self.push(Tensor::new(&[bs, m, n], data).unwrap(), Op::BatchMatmul(a, b))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(d) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxLast(x))
    }

    /// Deformable convolution with stride 1 and same padding. `offsets` has
    /// shape `[N, H*W, k*k*2]` (`(dy, dx)` pairs per kernel tap).
    pub fn deform_conv(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, ov, wv) = (self.value(x), self.value(offsets), self.value(w));
        let (n, c, h, wd) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let k = wv.dim(2);
        assert_eq!(wv.dim(1), c, "deform_conv: channel mismatch");
        assert_eq!(ov.numel(), n * h * wd * k * k * 2, "deform_conv: offsets shape");
        let geom = DeformGeom { c_in: c, h, w: wd, c_out: wv.dim(0), k };
        let bias = b.map(|b| self.value(b).data());
        let data = kernels::deform_conv_forward(xv.data(), n, &geom, ov.data(), wv.data(), bias);
        let out = Tensor::new(&[n, geom.c_out, h, wd], data).unwrap();
        self.push(out, Op::DeformConv { x, offsets, w, b, geom })
    }

    /// Mean of squared differences over every element.
    pub fn mse_loss(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let pv = self.value(pred);
        pv.ensure_same_shape(&target).expect("mse_loss: shape mismatch");
        let mut s = T::ZERO;
        for (&a, &b) in pv.data().iter().zip(target.data()) {
            let d = a - b;
            s += d * d;
        }
        let loss = s / T::from_f64(pv.numel() as f64);
        self.push(Tensor::scalar(loss), Op::MseLoss { pred, target })
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let k = lv.dim(1);
        let mut s = T::ZERO;
        for (row, &y) in lv.data().chunks(k).zip(&labels) {
            let mx = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut z = T::ZERO;
            row.iter().for_each(|&v| z += (v - mx).exp());
            s += T::from_f64(z.to_f64().ln()) + mx - row[y];
        }
        let loss = s / T::from_f64(labels.len() as f64);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels })
    }

    /// Mean Euclidean norm of trailing `(dy, dx)` pairs.
    pub fn offset_loss(&mut self, offsets: Var) -> Var {
        let ov = self.value(offsets);
        let loss = T::from_f64(offset_norm_mean(ov.data()));
        self.push(Tensor::scalar(loss), Op::OffsetLoss(offsets))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, gout.clone());
                accumulate(grads, *b, gout.clone());
            }
            Op::AddChannel(x, c) => {
                accumulate(grads, *x, gout.clone());
                let cv = self.value(*c);
                let inner = gout.numel() / cv.numel();
                let gc: Vec<T> = g.chunks(inner).map(sum_slice).collect();
                accumulate(grads, *c, Tensor::new(cv.shape(), gc).unwrap());
            }
            Op::Film { x, scale, shift } => {
                let (xv, sv) = (self.value(*x), self.value(*scale));
                let inner = xv.numel() / sv.numel();
                let mut gx = gout.clone();
                let mut gs = vec![T::ZERO; sv.numel()];
                let mut gb = vec![T::ZERO; sv.numel()];
                for j in 0..sv.numel() {
                    let s1 = T::ONE + sv.data()[j];
                    let xs = &xv.data()[j * inner..(j + 1) * inner];
                    let gj = &g[j * inner..(j + 1) * inner];
                    let mut acc_s = T::ZERO;
                    let mut acc_b = T::ZERO;
                    for (&gv, &xv) in gj.iter().zip(xs) {
                        acc_s += gv * xv;
                        acc_b += gv;
                    }
                    gs[j] = acc_s;
                    gb[j] = acc_b;
                    gx.data_mut()[j * inner..(j + 1) * inner].iter_mut().for_each(|v| *v *= s1);
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *scale, Tensor::new(sv.shape(), gs).unwrap());
                accumulate(grads, *shift, Tensor::new(sv.shape(), gb).unwrap());
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, gout.map(|v| v * c));
            }
            Op::ScalePerSample(x, coef) => {
                let inner = gout.numel() / coef.len();
                let mut gx = gout.clone();
                for (chunk, &c) in gx.data_mut().chunks_mut(inner).zip(coef) {
                    chunk.iter_mut().for_each(|v| *v *= c);
                }
                accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(gout, |v, gv| {
                        let s = T::ONE / (T::ONE + (-v).exp());
                        gv * s * (T::ONE + v * (T::ONE - s))
                    })
                    .unwrap();
                accumulate(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.dim(0);
                let mut dw = vec![T::ZERO; wv.numel()];
                let mut db = b.map(|b| vec![T::ZERO; self.value(b).numel()]);
                let need_dx = self.needs_grad(*x);
                let dx = kernels::conv2d_backward(
                    xv.data(),
                    n,
                    geom,
                    wv.data(),
                    g,
                    &mut dw,
                    db.as_deref_mut(),
                    need_dx,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                }
                accumulate(grads, *w, Tensor::new(wv.shape(), dw).unwrap());
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db).unwrap());
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, means, rstds } => {
                let xv = self.value(*x);
                let (n, c) = (xv.dim(0), xv.dim(1));
                let hw = xv.numel() / (n * c);
                let mut dg = vec![T::ZERO; c];
                let mut dbt = vec![T::ZERO; c];
                let dx = kernels::group_norm_backward(
                    xv.data(),
                    n,
                    c,
                    hw,
                    *groups,
                    self.value(*gamma).data(),
                    means,
                    rstds,
                    g,
                    &mut dg,
                    &mut dbt,
                );
                accumulate(grads, *x, Tensor::new(xv.shape(), dx).unwrap());
                accumulate(grads, *gamma, Tensor::new(&[c], dg).unwrap());
                accumulate(grads, *beta, Tensor::new(&[c], dbt).unwrap());
            }
            Op::Upsample2(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
                let mut gx = Tensor::zeros(xv.shape());
                let d = gx.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatChannels(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.dim(0);
                let (sa, sb) = (av.numel() / n, bv.numel() / n);
                let mut ga = Vec::with_capacity(av.numel());
                let mut gb = Vec::with_capacity(bv.numel());
                for i in 0..n {
                    let base = i * (sa + sb);
                    ga.extend_from_slice(&g[base..base + sa]);
                    gb.extend_from_slice(&g[base + sa..base + sa + sb]);
                }
                accumulate(grads, *a, Tensor::new(av.shape(), ga).unwrap());
                accumulate(grads, *b, Tensor::new(bv.shape(), gb).unwrap());
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let hw = xv.numel() / gout.numel();
                let inv = T::from_f64(1.0 / hw as f64);
                let mut gx = Vec::with_capacity(xv.numel());
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), gx).unwrap());
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (out_f, in_f) = (wv.dim(0), wv.dim(1));
                let m = xv.numel() / in_f;
                let mut gx = vec![T::ZERO; xv.numel()];
                T::gemm(
                    m, out_f, in_f, T::ONE, g, out_f as isize, 1, wv.data(), in_f as isize, 1,
                    T::ZERO, &mut gx, in_f as isize, 1,
                );
                let mut gw = vec![T::ZERO; wv.numel()];
                T::gemm(
                    out_f, m, in_f, T::ONE, g, 1, out_f as isize, xv.data(), in_f as isize, 1,
                    T::ZERO, &mut gw, in_f as isize, 1,
                );
                accumulate(grads, *x, Tensor::new(xv.shape(), gx).unwrap());
                accumulate(grads, *w, Tensor::new(wv.shape(), gw).unwrap());
                if let Some(b) = b {
                    let mut gb = vec![T::ZERO; out_f];
                    for row in g.chunks(out_f) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[out_f], gb).unwrap());
                }
            }
            Op::Reshape(x) => {
                let gx = gout.clone().reshape(self.value(*x).shape()).unwrap();
                accumulate(grads, *x, gx);
            }
            Op::TransposeLast2(x) => accumulate(grads, *x, transpose_last2(gout)),
            Op::BatchMatmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.dim(0), av.dim(1), av.dim(2));
                let n = bv.dim(2);
                let mut ga = vec![T::ZERO; av.numel()];
                let mut gb = vec![T::ZERO; bv.numel()];
                for i in 0..bs {
                    let gi = &g[i * m * n..];
                    // dA = dC * B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::ONE,
                        gi,
                        n as isize,
                        1,
                        &bv.data()[i * k * n..],
                        1,
                        n as isize,
                        T::ZERO,
                        &mut ga[i * m * k..],
                        k as isize,
                        1,
                    );
                    // dB = A^T * dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::ONE,
                        &av.data()[i * m * k..],
                        1,
                        k as isize,
                        gi,
                        n as isize,
                        1,
                        T::ZERO,
                        &mut gb[i * k * n..],
                        n as isize,
                        1,
                    );
                }
                accumulate(grads, *a, Tensor::new(av.shape(), ga).unwrap());
                accumulate(grads, *b, Tensor::new(bv.shape(), gb).unwrap());
            }
            Op::SoftmaxLast(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.chunks(d)) {
                    let mut dot = T::ZERO;
                    for (&a, &b) in yr.iter().zip(gr) {
                        dot += a * b;
                    }
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                accumulate(grads, *x, Tensor::new(y.shape(), gx).unwrap());
            }
            Op::DeformConv { x, offsets, w, b, geom } => {
                let (xv, ov, wv) = (self.value(*x), self.value(*offsets), self.value(*w));
                let n = xv.dim(0);
                let mut dw = vec![T::ZERO; wv.numel()];
                let mut db = b.map(|b| vec![T::ZERO; self.value(b).numel()]);
                let r = kernels::deform_conv_backward(
                    xv.data(),
                    n,
                    geom,
                    ov.data(),
                    wv.data(),
                    g,
                    &mut dw,
                    db.as_deref_mut(),
                );
                accumulate(grads, *x, Tensor::new(xv.shape(), r.dx).unwrap());
                accumulate(grads, *offsets, Tensor::new(ov.shape(), r.doffsets).unwrap());
                accumulate(grads, *w, Tensor::new(wv.shape(), dw).unwrap());
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db).unwrap());
                }
            }
            Op::MseLoss { pred, target } => {
                let gl = g[0];
                let pv = self.value(*pred);
                let c = T::from_f64(2.0 / pv.numel() as f64) * gl;
                let gp = pv.zip_map(target, |a, b| (a - b) * c).unwrap();
                accumulate(grads, *pred, gp);
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let k = lv.dim(1);
                let c = g[0] / T::from_f64(labels.len() as f64);
                let mut gx = Vec::with_capacity(lv.numel());
                for (row, &y) in lv.data().chunks(k).zip(labels) {
                    let mut p = row.to_vec();
                    softmax_in_place(&mut p);
                    p[y] -= T::ONE;
                    gx.extend(p.into_iter().map(|v| v * c));
                }
                accumulate(grads, *logits, Tensor::new(lv.shape(), gx).unwrap());
            }
            Op::OffsetLoss(x) => {
                let xv = self.value(*x);
                let pairs = xv.numel() / 2;
                let c = g[0] / T::from_f64(pairs as f64);
                let mut gx = vec![T::ZERO; xv.numel()];
                for (o, d) in gx.chunks_mut(2).zip(xv.data().chunks(2)) {
                    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    if norm > T::ZERO {
                        o[0] = c * d[0] / norm;
                        o[1] = c * d[1] / norm;
                    }
                }
                accumulate(grads, *x, Tensor::new(xv.shape(), gx).unwrap());
            }
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn sum_slice<T: Scalar>(s: &[T]) -> T {
    let mut acc = T::ZERO;
    s.iter().for_each(|&v| acc += v);
    acc
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(row[0], |a, &b| a.max(b));
    let mut z = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let nd = t.ndim();
    let (m, n) = (t.dim(nd - 2), t.dim(nd - 1));
    let b = t.numel() / (m * n);
    let mut data = vec![T::ZERO; t.numel()];
    for i in 0..b {
        let src = &t.data()[i * m * n..(i + 1) * m * n];
        let dst = &mut data[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            for c in 0..n {
                dst[c * m + r] = src[r * n + c];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(&shape, data).unwrap()
}

/// Mean Euclidean norm over consecutive `(dy, dx)` pairs, accumulated in f64.
pub fn offset_norm_mean<T: Scalar>(pairs: &[T]) -> f64 {
    let n = pairs.len() / 2;
    if n == 0 {
        return 0.0;
    }
    let s: f64 = pairs
        .chunks(2)
        .map(|d| {
            let (a, b) = (d[0].to_f64(), d[1].to_f64());
            (a * a + b * b).sqrt()
        })
        .sum();
    s / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

    /// Compares analytic input gradients of `build` (reduced to a scalar by
    /// an MSE against a fixed random target) with central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: &Build<'_>) {
        let mut r = rng::seeded(77);
        let eval = |xs: &[Tensor<f64>], target: Option<&Tensor<f64>>| {
            let mut g = Graph::new();
            // Leaves get no gradient, so each input passes through an identity node.
            let vars: Vec<Var> = xs
                .iter()
                .map(|t| {
                    let v = g.input(t.clone());
                    g.scale(v, 1.0)
                })
                .collect();
            let out = build(&mut g, &vars);
            let tgt = target.cloned().unwrap_or_else(|| Tensor::zeros(g.shape(out)));
            let loss = if g.value(out).numel() == 1 { out } else { g.mse_loss(out, tgt) };
            (g, vars, loss)
        };
        let shape = {
            let (g, vars, _) = eval(&inputs, None);
            let mut probe = g;
            build(&mut probe, &vars);
            probe.shape(Var(probe.nodes.len() - 1)).to_vec()
        };
        let target = Tensor::randn(&shape, &mut r);
        let (g, vars, loss) = eval(&inputs, Some(&target));
        let grads = g.backward(loss);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            for i in 0..x.numel() {
                let mut xs = inputs.clone();
                xs[k].data_mut()[i] += h;
                let (gp, _, lp) = eval(&xs, Some(&target));
                xs[k].data_mut()[i] -= 2.0 * h;
                let (gm, _, lm) = eval(&xs, Some(&target));
                let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = analytic.data()[i];
                assert!((fd - a).abs() <= 1e-5 + 1e-4 * fd.abs().max(a.abs()), "input {k} element {i}: fd {fd} analytic {a}");
            }
        }
    }

    fn rn(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut rng::seeded(seed))
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        check(vec![rn(&[2, 3, 2, 2], 1), rn(&[2, 3, 2, 2], 2)], &|g, v| {
            let a = g.add(v[0], v[1]);
            let s = g.sub(a, v[1]);
            let s = g.scale(s, 1.5);
            let s = g.scale_per_sample(s, vec![0.5, -2.0]);
            g.silu(s)
        });
        check(vec![rn(&[2, 3, 2, 2], 3), rn(&[2, 3], 4), rn(&[2, 3], 5)], &|g, v| g.film(v[0], v[1], v[2]));
        check(vec![rn(&[2, 3, 2, 2], 6), rn(&[2, 3], 7)], &|g, v| g.add_channel(v[0], v[1]));
    }

    #[test]
    fn convolution_and_normalisation_gradients() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            check(vec![rn(&[2, 2, 5, 4], 8), rn(&[3, 2, k, k], 9), rn(&[3], 10)], &|g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
        }
        check(vec![rn(&[2, 4, 3, 3], 11), rn(&[4], 12), rn(&[4], 13)], &|g, v| g.group_norm(v[0], v[1], v[2], 2));
    }

    #[test]
    fn resampling_and_layout_gradients() {
        check(vec![rn(&[1, 2, 2, 3], 14)], &|g, v| g.upsample2(v[0]));
        check(vec![rn(&[2, 1, 2, 2], 15), rn(&[2, 3, 2, 2], 16)], &|g, v| g.concat_channels(v[0], v[1]));
        check(vec![rn(&[2, 3, 2, 3], 17)], &|g, v| g.global_avg_pool(v[0]));
        check(vec![rn(&[2, 3, 4], 18), rn(&[5, 4], 19), rn(&[5], 20)], &|g, v| g.linear(v[0], v[1], Some(v[2])));
        check(vec![rn(&[2, 3, 4], 21), rn(&[2, 4, 2], 22)], &|g, v| {
            let t = g.transpose_last2(v[1]);
            let r = g.reshape(t, &[2, 2, 4]);
            let r = g.transpose_last2(r);
            g.batch_matmul(v[0], r)
        });
        check(vec![rn(&[2, 3, 4], 23)], &|g, v| g.softmax_last(v[0]));
    }

    #[test]
    fn loss_gradients() {
        check(vec![rn(&[3, 4], 24)], &|g, v| g.cross_entropy(v[0], vec![0, 3, 1]));
        check(vec![rn(&[2, 5, 2], 25)], &|g, v| g.offset_loss(v[0]));
    }

    #[test]
    fn deformable_gradients() {
        // Offsets are kept away from integers, where bilinear sampling has kinks.
        let mut off = rn(&[1, 12, 18], 26).map(|v| 0.3 * v.tanh());
        off.data_mut().iter_mut().for_each(|v| *v += 0.5);
        check(vec![rn(&[1, 2, 3, 4], 27), off, rn(&[2, 2, 3, 3], 28), rn(&[2], 29)], &|g, v| {
            g.deform_conv(v[0], v[1], v[2], Some(v[3]))
        });
    }

    #[test]
    fn integer_offsets_shift_the_input() {
        // A single centre tap with offset (0, 1) reads the right neighbour.
        let x = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let mut off = Tensor::<f64>::zeros(&[1, 6, 18]);
        for p in 0..6 {
            off.data_mut()[p * 18 + 4 * 2 + 1] = 1.0;
        }
        let mut g = Graph::new();
        let (xv, ov, wv) = (g.input(x), g.input(off), g.input(w));
        let y = g.deform_conv(xv, ov, wv, None);
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn fractional_offsets_interpolate_a_ramp() {
        // On a horizontal ramp, a half-pixel shift reads the midpoint.
        let x = Tensor::new(&[1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let mut off = Tensor::<f64>::zeros(&[1, 4, 18]);
        for p in 0..4 {
            off.data_mut()[p * 18 + 9] = 0.5;
        }
        let mut g = Graph::new();
        let (xv, ov, wv) = (g.input(x), g.input(off), g.input(w));
        let y = g.deform_conv(xv, ov, wv, None);
        assert_eq!(g.value(y).data(), &[0.5, 1.5, 2.5, 1.5]);
    }

    proptest::proptest! {
        #[test]
        fn offset_penalty_is_homogeneous(v in proptest::collection::vec(-5.0f64..5.0, 2..40), c in 0.0f64..10.0) {
            let v = if v.len() % 2 == 1 { v[1..].to_vec() } else { v };
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let (a, b) = (offset_norm_mean(&v), offset_norm_mean(&scaled));
            proptest::prop_assert!((b - c * a).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }
}
