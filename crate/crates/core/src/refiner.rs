//! Zero-shot style refiner.
//!
//! A conditional denoiser trained only on font-to-font pairs: given a
//! rendering `x_o` in some style and a reference rendering `x_ref` in the
//! canonical style, it generates `x_o`'s glyph in the canonical style. At
//! decipher time it is applied unchanged to initial decipherments.
//!
//! Structure:
//! * a style encoder (strided convolutions, global pooling) maps `x_ref` to
//!   a style vector that modulates the U-Net features;
//! * a content encoder, shared between `x_o` and `x_ref`, yields three
//!   feature scales;
//! * at each scale the source features are concatenated onto the U-Net
//!   features and projected back, and a reference-guided block computes
//!   attention with queries from the reference features and keys/values
//!   from the U-Net features, turns it into per-tap sampling offsets and
//!   renders the U-Net features through a deformable convolution that is
//!   added back residually.
//!
//! The network predicts a correction to `x_o`; the clean-image estimate
//! `x0 = x_o + correction` is converted to a noise estimate, so the reverse
//! process of an untrained (zero-initialised head) refiner returns `x_o`
//! exactly.

use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveKind, ParameterArchive, TrainingMeta};
use crate::denoiser::{batch_indices, planned_steps, TrainOptions};
use crate::diffusion::{forward_sample, reverse_step, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::glyph_data::TrainingPair;
use crate::graph::{Graph, Var};
use crate::image::{GlyphImage, Role};
use crate::nn::{timestep_embedding, Conv2d, Init, Linear, ParamStore, ResBlock, SpatialAttention};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, GaussianNoise, NoiseSource, Rng};
use crate::tensor::{Scalar, Tensor};

pub const SCALES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Width of the full- and half-resolution U-Net stages.
    pub stem_channels: usize,
    /// U-Net channels at the three feature scales (1/4, 1/8, 1/16 of the image).
    pub unet_channels: Vec<usize>,
    /// Content-encoder channels at the same scales.
    pub content_channels: Vec<usize>,
    pub style_dim: usize,
    pub key_dim: usize,
    pub ffn_hidden: usize,
    /// Deformable kernel side; the tap count is its square.
    pub kernel: usize,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub offset_weight: f64,
    pub schedule: ScheduleConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            image_channels: 3,
            stem_channels: 8,
            unet_channels: vec![16, 32, 32],
            content_channels: vec![16, 32, 32],
            style_dim: 32,
            key_dim: 16,
            ffn_hidden: 32,
            kernel: 3,
            time_embed_dim: 16,
            norm_groups: 4,
            offset_weight: 0.5,
            schedule: ScheduleConfig::default(),
            lr: 2e-5,
            batch_size: 8,
            epochs: 300,
            max_steps: None,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            checkpoint_every: 500,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unet_channels.len() != SCALES || self.content_channels.len() != SCALES {
            return Err(Error::Config(format!("refiner needs exactly {SCALES} channel entries per scale list")));
        }
        let all = [
            self.image_size,
            self.image_channels,
            self.stem_channels,
            self.style_dim,
            self.ffn_hidden,
            self.kernel,
            self.time_embed_dim,
            self.norm_groups,
            self.batch_size,
            self.checkpoint_every,
        ];
        if all.contains(&0) || self.unet_channels.contains(&0) || self.content_channels.contains(&0) {
            return Err(Error::Config("refiner sizes must be positive".into()));
        }
        if self.key_dim == 0 {
            return Err(Error::Config("refiner key dimension must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("deformable kernel side must be odd".into()));
        }
        if self.image_size % 16 != 0 {
            return Err(Error::Config(format!("refiner image size {} must be a multiple of 16", self.image_size)));
        }
        if !(self.offset_weight >= 0.0) || !(self.lr >= 0.0) {
            return Err(Error::Config("offset weight and learning rate must be non-negative".into()));
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Reference-guided offset block for one scale.
#[derive(Clone, Debug)]
pub struct RsiBlock {
    pub attn: SpatialAttention,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub deform: Conv2d,
    pub taps: usize,
}

/// Graph handles produced by [`RsiBlock::forward`].
pub struct RsiOutput {
    /// `[N, H*W, d_k]` attended features.
    pub attended: Var,
    /// `[N, H*W, H*W]` attention weights.
    pub weights: Var,
    /// `[N, H*W, K*2]` offsets, `(dy, dx)` per tap.
    pub offsets: Var,
    /// `o + deformable rendering of o`.
    pub out: Var,
}

impl RsiBlock {
    pub fn new<T: Scalar, R: rand::Rng>(
        init: &mut Init<'_, T, R>,
        name: &str,
        ref_channels: usize,
        feat_channels: usize,
        key_dim: usize,
        hidden: usize,
        kernel: usize,
    ) -> Self {
        init.scoped(name, |i| RsiBlock {
            attn: SpatialAttention::new(i, "attn", ref_channels, feat_channels, key_dim, key_dim),
            ffn1: Linear::new(i, "ffn1", key_dim, hidden),
            ffn2: Linear::zeros(i, "ffn2", hidden, kernel * kernel * 2),
            deform: Conv2d::new(i, "deform", feat_channels, feat_channels, kernel, 1),
            taps: kernel * kernel,
        })
    }

    /// Attention (queries from `f_ref`, keys and values from `o`), offsets
    /// from a two-layer feed-forward head, then the residual deformable
    /// rendering of `o`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, f_ref: Var, o: Var) -> RsiOutput {
        let q_seq = SpatialAttention::flatten(g, f_ref);
        let kv_seq = SpatialAttention::flatten(g, o);
        let a = self.attn.forward(g, ps, q_seq, kv_seq);
        let h = self.ffn1.forward(g, ps, a.attended);
        let h = g.silu(h);
        let offsets = self.ffn2.forward(g, ps, h);
        let w = g.param(ps, self.deform.w);
        let b = g.param(ps, self.deform.b);
        let rendered = g.deform_conv(o, offsets, w, Some(b));
        let out = g.add(o, rendered);
        RsiOutput { attended: a.attended, weights: a.weights, offsets, out }
    }

    /// Tensor-level evaluation: returns `(attended, weights, offsets)` with
    /// offsets reshaped to `[N, H, W, K, 2]`.
    pub fn offsets<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        f_ref: &Tensor<T>,
        o: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if f_ref.ndim() != 4 || o.ndim() != 4 || f_ref.shape()[2..] != o.shape()[2..] || f_ref.dim(0) != o.dim(0) {
            return Err(Error::Shape(format!("reference {:?} and features {:?} differ spatially", f_ref.shape(), o.shape())));
        }
        let mut g = Graph::new();
        let fr = g.input(f_ref.clone());
        let ov = g.input(o.clone());
        let r = self.forward(&mut g, ps, fr, ov);
        let (n, h, w) = (o.dim(0), o.dim(2), o.dim(3));
        let offsets = g.value(r.offsets).clone().reshape(&[n, h, w, self.taps, 2])?;
        Ok((g.value(r.attended).clone(), g.value(r.weights).clone(), offsets))
    }
}

/// Deformable convolution of `o` (`[N, C, H, W]`) with `(dy, dx)` offsets
/// `[N, H, W, K, 2]` and weights `[C_out, C, k, k]`.
pub fn deformable_render<T: Scalar>(
    o: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if !offsets.all_finite() {
        return Err(Error::NonFinite("deformation offsets".into()));
    }
    if o.ndim() != 4 || weight.ndim() != 4 || weight.dim(1) != o.dim(1) || weight.dim(2) != weight.dim(3) {
        return Err(Error::Shape(format!("features {:?} incompatible with kernel {:?}", o.shape(), weight.shape())));
    }
    let (n, h, w, k) = (o.dim(0), o.dim(2), o.dim(3), weight.dim(2));
    if offsets.shape() != [n, h, w, k * k, 2] {
        return Err(Error::Shape(format!("offsets {:?}, expected {:?}", offsets.shape(), [n, h, w, k * k, 2])));
    }
    let mut g = Graph::new();
    let x = g.input(o.clone());
    let off = g.input(offsets.clone().reshape(&[n, h * w, k * k * 2])?);
    let wv = g.input(weight.clone());
    let bv = bias.map(|b| g.input(b.clone()));
    let out = g.deform_conv(x, off, wv, bv);
    Ok(g.value(out).clone())
}

/// Mean Euclidean norm of the offsets (trailing dimension 2).
pub fn offset_loss<T: Scalar>(offsets: &Tensor<T>) -> Result<f64> {
    if !offsets.all_finite() {
        return Err(Error::NonFinite("deformation offsets".into()));
    }
    if offsets.shape().last() != Some(&2) {
        return Err(Error::Shape(format!("offsets must end in a pair dimension, got {:?}", offsets.shape())));
    }
    Ok(crate::graph::offset_norm_mean(offsets.data()))
}

struct Encoders {
    content: Vec<Conv2d>,
    style: Vec<Conv2d>,
    style_proj: Linear,
}

struct Level {
    down: Option<Conv2d>,
    mix: Conv2d,
    film_scale: Linear,
    film_shift: Linear,
    res: ResBlock,
    rsi: RsiBlock,
}

/// Refiner parameter layout.
pub struct RefinerNet {
    cfg: RefinerConfig,
    enc: Encoders,
    time1: Linear,
    time2: Linear,
    style_to_cond: Linear,
    stem: Conv2d,
    half: Conv2d,
    quarter: Conv2d,
    levels: Vec<Level>,
    up: Vec<ResBlock>,
    up_half: Conv2d,
    up_full: Conv2d,
    out_norm: crate::nn::GroupNorm,
    out_conv: Conv2d,
}

/// Per-image conditioning computed once per refine call.
pub struct Encoded<T: Scalar> {
    pub source: Tensor<T>,
    pub style: Tensor<T>,
    pub content_source: Vec<Tensor<T>>,
    pub content_reference: Vec<Tensor<T>>,
}

struct EncodedVars {
    source: Var,
    style: Var,
    f_o: Vec<Var>,
    f_ref: Vec<Var>,
}

impl RefinerNet {
    pub fn new<T: Scalar>(cfg: &RefinerConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut init = Init::new(store, &mut rng);
        let i = &mut init;
        let c = cfg.image_channels;
        let (s, u, f) = (cfg.stem_channels, &cfg.unet_channels, &cfg.content_channels);
        let tdim = cfg.time_embed_dim * 2;
        let groups = cfg.norm_groups;
        let enc = Encoders {
            content: vec![
                Conv2d::new(i, "content.0", c, s, 3, 2),
                Conv2d::new(i, "content.1", s, f[0], 3, 2),
                Conv2d::new(i, "content.2", f[0], f[1], 3, 2),
                Conv2d::new(i, "content.3", f[1], f[2], 3, 2),
            ],
            style: vec![
                Conv2d::new(i, "style.0", c, s, 3, 2),
                Conv2d::new(i, "style.1", s, 2 * s, 3, 2),
                Conv2d::new(i, "style.2", 2 * s, 4 * s, 3, 2),
                Conv2d::new(i, "style.3", 4 * s, 4 * s, 3, 2),
            ],
            style_proj: Linear::new(i, "style.proj", 4 * s, cfg.style_dim),
        };
        let time1 = Linear::new(i, "time.0", cfg.time_embed_dim, tdim);
        let time2 = Linear::new(i, "time.1", tdim, tdim);
        let style_to_cond = Linear::new(i, "style.cond", cfg.style_dim, tdim);
        let stem = Conv2d::new(i, "stem", 2 * c, s, 3, 1);
        let half = Conv2d::new(i, "half", s, s, 3, 2);
        let quarter = Conv2d::new(i, "quarter", s, u[0], 3, 2);
        let levels = (0..SCALES)
            .map(|l| {
                let name = format!("level.{l}");
                Level {
                    down: (l > 0).then(|| Conv2d::new(i, &format!("{name}.down"), u[l - 1], u[l], 3, 2)),
                    mix: Conv2d::new(i, &format!("{name}.mix"), u[l] + f[l], u[l], 1, 1),
                    film_scale: Linear::zeros(i, &format!("{name}.film_scale"), tdim, u[l]),
                    film_shift: Linear::zeros(i, &format!("{name}.film_shift"), tdim, u[l]),
                    res: ResBlock::new(i, &format!("{name}.res"), u[l], u[l], Some(tdim), groups),
                    rsi: RsiBlock::new(i, &format!("{name}.rsi"), f[l], u[l], cfg.key_dim, cfg.ffn_hidden, cfg.kernel),
                }
            })
            .collect();
        let up = (0..SCALES - 1)
            .map(|l| ResBlock::new(i, &format!("up.{l}"), u[l + 1] + u[l], u[l], Some(tdim), groups))
            .collect();
        let up_half = Conv2d::new(i, "up.half", u[0] + s, s, 3, 1);
        let up_full = Conv2d::new(i, "up.full", 2 * s, s, 3, 1);
        let out_norm = crate::nn::GroupNorm::new(i, "out.norm", s, groups);
        let out_conv = Conv2d::zeros(i, "out.conv", s, c, 3);
        RefinerNet {
            cfg: cfg.clone(),
            enc,
            time1,
            time2,
            style_to_cond,
            stem,
            half,
            quarter,
            levels,
            up,
            up_half,
            up_full,
            out_norm,
            out_conv,
        }
    }

    fn content<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(SCALES);
        for (k, conv) in self.enc.content.iter().enumerate() {
            h = conv.forward(g, ps, h);
            h = g.silu(h);
            if k >= 1 {
                out.push(h);
            }
        }
        out
    }

    fn style<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.enc.style {
            h = conv.forward(g, ps, h);
            h = g.silu(h);
        }
        let pooled = g.global_avg_pool(h);
        self.enc.style_proj.forward(g, ps, pooled)
    }

    fn encode_vars<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x_o: Var, x_ref: Var) -> EncodedVars {
        let style = self.style(g, ps, x_ref);
        let f_o = self.content(g, ps, x_o);
        let f_ref = self.content(g, ps, x_ref);
        EncodedVars { source: x_o, style, f_o, f_ref }
    }

    /// Clean-image estimate, noise estimate and per-scale offsets.
    fn denoise<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        enc: &EncodedVars,
        xt: Var,
        ts: &[usize],
        sched: &NoiseSchedule,
    ) -> (Var, Var, Vec<Var>) {
        let temb = g.input(timestep_embedding(ts, self.cfg.time_embed_dim));
        let temb = self.time1.forward(g, ps, temb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, ps, temb);
        let s = self.style_to_cond.forward(g, ps, enc.style);
        let cond = g.add(temb, s);

        let x = g.concat_channels(xt, enc.source);
        let full = self.stem.forward(g, ps, x);
        let full = g.silu(full);
        let half = self.half.forward(g, ps, full);
        let half = g.silu(half);
        let mut h = self.quarter.forward(g, ps, half);
        let mut skips = Vec::with_capacity(SCALES);
        let mut offsets = Vec::with_capacity(SCALES);
        for (l, lvl) in self.levels.iter().enumerate() {
            if let Some(d) = &lvl.down {
                h = d.forward(g, ps, h);
            }
            let m = g.concat_channels(h, enc.f_o[l]);
            h = lvl.mix.forward(g, ps, m);
            let sc = lvl.film_scale.forward(g, ps, cond);
            let sh = lvl.film_shift.forward(g, ps, cond);
            h = g.film(h, sc, sh);
            h = lvl.res.forward(g, ps, h, Some(cond));
            let r = lvl.rsi.forward(g, ps, enc.f_ref[l], h);
            offsets.push(r.offsets);
            h = r.out;
            skips.push(h);
        }
        for l in (0..SCALES - 1).rev() {
            h = g.upsample2(h);
            h = g.concat_channels(h, skips[l]);
            h = self.up[l].forward(g, ps, h, Some(cond));
        }
        h = g.upsample2(h);
        h = g.concat_channels(h, half);
        h = self.up_half.forward(g, ps, h);
        h = g.silu(h);
        h = g.upsample2(h);
        h = g.concat_channels(h, full);
        h = self.up_full.forward(g, ps, h);
        let h = self.out_norm.forward(g, ps, h);
        let h = g.silu(h);
        let correction = self.out_conv.forward(g, ps, h);
        let x0 = g.add(enc.source, correction);
        // eps = (x_t - sqrt(gamma) x0) / sqrt(1 - gamma)
        let inv: Vec<T> = ts.iter().map(|&t| T::from_f64(1.0 / (1.0 - sched.gamma(t)).sqrt())).collect();
        let k: Vec<T> = ts.iter().map(|&t| T::from_f64(sched.gamma(t).sqrt() / (1.0 - sched.gamma(t)).sqrt())).collect();
        let a = g.scale_per_sample(xt, inv);
        let b = g.scale_per_sample(x0, k);
        let eps = g.sub(a, b);
        (x0, eps, offsets)
    }
}

/// Trained or freshly initialised refiner.
pub struct Refiner<T: Scalar = f32> {
    pub config: RefinerConfig,
    net: RefinerNet,
    params: ParamStore<T>,
    sched: NoiseSchedule,
}

impl<T: Scalar> Refiner<T> {
    pub fn new(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let sched = config.schedule.build()?;
        let mut params = ParamStore::new();
        let net = RefinerNet::new(&config, &mut params, seed);
        Ok(Self { config, net, params, sched })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn rsi_block(&self, scale: usize) -> &RsiBlock {
        &self.net.levels[scale].rsi
    }

    fn check(&self, img: &Tensor<T>) -> Result<()> {
        let (s, c) = (self.config.image_size, self.config.image_channels);
        if img.ndim() != 4 || img.shape()[1..] != [c, s, s] {
            return Err(Error::Shape(format!("refiner expects [N, {c}, {s}, {s}], got {:?}", img.shape())));
        }
        Ok(())
    }

    /// Style vectors `[N, style_dim]` for a batch of references.
    pub fn encode_style(&self, x_ref: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x_ref)?;
        let mut g = Graph::new();
        let x = g.input(x_ref.clone());
        let s = self.net.style(&mut g, &self.params, x);
        Ok(g.value(s).clone())
    }

    /// Content pyramids of the source and the reference (shared encoder).
    pub fn encode_content(&self, x_o: &Tensor<T>, x_ref: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
        self.check(x_o)?;
        self.check(x_ref)?;
        let mut g = Graph::new();
        let (a, b) = (g.input(x_o.clone()), g.input(x_ref.clone()));
        let fa = self.net.content(&mut g, &self.params, a);
        let fb = self.net.content(&mut g, &self.params, b);
        let collect = |g: &Graph<T>, v: &[Var]| v.iter().map(|&x| g.value(x).clone()).collect();
        Ok((collect(&g, &fa), collect(&g, &fb)))
    }

    pub fn encode(&self, x_o: &Tensor<T>, x_ref: &Tensor<T>) -> Result<Encoded<T>> {
        let (content_source, content_reference) = self.encode_content(x_o, x_ref)?;
        Ok(Encoded { source: x_o.clone(), style: self.encode_style(x_ref)?, content_source, content_reference })
    }

    fn enc_inputs(g: &mut Graph<T>, e: &Encoded<T>) -> EncodedVars {
        EncodedVars {
            source: g.input(e.source.clone()),
            style: g.input(e.style.clone()),
            f_o: e.content_source.iter().map(|t| g.input(t.clone())).collect(),
            f_ref: e.content_reference.iter().map(|t| g.input(t.clone())).collect(),
        }
    }

    /// Noise estimate for `x_t` given precomputed conditioning.
    pub fn predict_noise(&self, enc: &Encoded<T>, xt: &Tensor<T>, ts: &[usize]) -> Result<Tensor<T>> {
        xt.ensure_same_shape(&enc.source)?;
        for &t in ts {
            self.sched.check_t(t)?;
        }
        let mut g = Graph::new();
        let ev = Self::enc_inputs(&mut g, enc);
        let x = g.input(xt.clone());
        let (_, eps, _) = self.net.denoise(&mut g, &self.params, &ev, x, ts, &self.sched);
        Ok(g.value(eps).clone())
    }

    /// Training objective on one noised batch: returns `(total, denoising,
    /// offset)` losses and the gradient graph output.
    pub fn objective(&self, batch: &RefinerBatch<T>) -> (f64, f64, f64, Vec<Tensor<T>>) {
        let mut g = Graph::new();
        let x_o = g.input(batch.source.clone());
        let x_ref = g.input(batch.reference.clone());
        let enc = self.net.encode_vars(&mut g, &self.params, x_o, x_ref);
        let xt = g.input(batch.xt.clone());
        let (_, eps, offsets) = self.net.denoise(&mut g, &self.params, &enc, xt, &batch.ts, &self.sched);
        let den = g.mse_loss(eps, batch.eps.clone());
        let mut total = den;
        let mut off_sum = 0.0;
        let w = T::from_f64(self.config.offset_weight / SCALES as f64);
        for o in offsets {
            let l = g.offset_loss(o);
            off_sum += g.value(l).item().to_f64();
            let l = g.scale(l, w);
            total = g.add(total, l);
        }
        let grads = g.backward(total);
        (
            g.value(total).item().to_f64(),
            g.value(den).item().to_f64(),
            off_sum / SCALES as f64,
            grads.param_grads(&self.params),
        )
    }
}

impl Refiner<f32> {
    pub fn from_archive(archive: &ParameterArchive) -> Result<Self> {
        archive.expect_kind(ArchiveKind::Refiner)?;
        let mut r = Self::new(archive.config()?, 0)?;
        r.params.load_from(&archive.params)?;
        Ok(r)
    }

    /// Polish an initial decipherment toward the canonical style of `x_ref`.
    pub fn refine(&self, x0_init: &GlyphImage, x_ref: &GlyphImage, seed: u64) -> Result<GlyphImage> {
        let mut noise = GaussianNoise::new(seed);
        self.refine_with(x0_init, x_ref, &mut noise)
    }

    pub fn refine_with(&self, x0_init: &GlyphImage, x_ref: &GlyphImage, noise: &mut dyn NoiseSource) -> Result<GlyphImage> {
        let (s, c) = (self.config.image_size, self.config.image_channels);
        x0_init.check_dims(s, s, c)?;
        x_ref.check_dims(s, s, c)?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite("refiner parameters".into()));
        }
        let shape = [1, c, s, s];
        let src = x0_init.pixels().clone().reshape(&shape)?;
        let rf = x_ref.pixels().clone().reshape(&shape)?;
        let enc = self.encode(&src, &rf)?;
        let mut x = noise.draw(&shape);
        for t in (1..=self.sched.steps()).rev() {
            let eps = self.predict_noise(&enc, &x, &[t])?;
            let z = if t > 1 { noise.draw(&shape) } else { Tensor::zeros(&shape) };
            x = reverse_step(&x, &eps, t, &self.sched, &z)?;
            if !x.all_finite() {
                return Err(Error::NonFinite(format!("refiner state at t = {t}")));
            }
        }
        GlyphImage::from_clipped(x.reshape(&[c, s, s])?, Role::Generated, x0_init.category.clone())
    }
}

/// Noised refiner batch.
pub struct RefinerBatch<T: Scalar> {
    pub source: Tensor<T>,
    pub reference: Tensor<T>,
    pub xt: Tensor<T>,
    pub eps: Tensor<T>,
    pub ts: Vec<usize>,
}

/// One refiner example: source-style rendering, its canonical rendering and
/// a canonical reference of some (usually other) glyph.
pub struct RefinerExample<'a> {
    pub source: &'a Tensor<f32>,
    pub target: &'a Tensor<f32>,
    pub reference: &'a Tensor<f32>,
}

pub fn noise_refiner_batch<T: Scalar>(items: &[RefinerExample<'_>], sched: &NoiseSchedule, rng: &mut Rng) -> Result<RefinerBatch<T>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut xts = Vec::new();
    let mut epss = Vec::new();
    let mut ts = Vec::new();
    for it in items {
        let t = 1 + rng::below(rng, sched.steps());
        let eps = Tensor::<T>::randn(it.target.shape(), rng);
        xts.push(forward_sample(&it.target.cast::<T>(), t, &eps, sched)?);
        epss.push(eps);
        ts.push(t);
    }
    let stack = |v: Vec<Tensor<T>>| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok(RefinerBatch {
        source: stack(items.iter().map(|i| i.source.cast()).collect())?,
        reference: stack(items.iter().map(|i| i.reference.cast()).collect())?,
        xt: stack(xts)?,
        eps: stack(epss)?,
        ts,
    })
}

/// Train the refiner on one-to-one font pairs. `references` is the pool of
/// canonical renderings a reference is drawn from for each example.
pub fn train_refiner(
    pairs: &[TrainingPair],
    references: &[GlyphImage],
    config: &RefinerConfig,
    opts: TrainOptions<'_>,
) -> Result<ParameterArchive> {
    if pairs.is_empty() || references.is_empty() {
        return Err(Error::Data("refiner corpus is empty".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.condition.role == Role::Condition) {
        return Err(Error::Data(format!("ancient-script image of {} in refiner training data", p.category)));
    }
    if references.iter().any(|r| r.role == Role::Condition) {
        return Err(Error::Data("ancient-script image among refiner references".into()));
    }
    let (s, c) = (config.image_size, config.image_channels);
    for p in pairs {
        p.condition.check_dims(s, s, c)?;
        p.target.check_dims(s, s, c)?;
    }
    let total = planned_steps(pairs.len(), config.batch_size, config.epochs, config.max_steps);
    let mut model = Refiner::<f32>::new(config.clone(), opts.seed)?;
    let mut opt = Adam::new(config.adam(), &model.params);
    let mut meta = TrainingMeta { seed: opts.seed, ..Default::default() };
    if let Some(prev) = &opts.resume {
        model.params.load_from(&prev.params)?;
        if let Some(o) = prev.optimizer(config.adam())? {
            opt = o;
        }
        meta = prev.manifest.training.clone();
        info!("resuming refiner training at step {}", meta.step);
    }
    let steps_per_epoch = pairs.len().div_ceil(config.batch_size);
    let mut last_checkpoint: Option<PathBuf> = None;
    while meta.step < total {
        let step = meta.step;
        let mut rng = rng::substream(opts.seed, "refiner-step", step as u64);
        let items: Vec<RefinerExample<'_>> = batch_indices(opts.seed, pairs.len(), config.batch_size, step)
            .into_iter()
            .map(|i| RefinerExample {
                source: pairs[i].condition.pixels(),
                target: pairs[i].target.pixels(),
                reference: references[rng::below(&mut rng, references.len())].pixels(),
            })
            .collect();
        let batch = noise_refiner_batch::<f32>(&items, &model.sched, &mut rng)?;
        let (loss, den, off, grads) = model.objective(&batch);
        if !loss.is_finite() {
            let detail = match &last_checkpoint {
                Some(p) => format!("loss {loss}; last good checkpoint at {}", p.display()),
                None => format!("loss {loss}"),
            };
            return Err(Error::Divergence { step, detail });
        }
        opt.step(&mut model.params, &grads);
        meta.step += 1;
        meta.epoch = meta.step / steps_per_epoch;
        meta.loss_history.push(loss as f32);
        if meta.step % 50 == 0 {
            debug!("refiner step {} loss {loss:.5} (denoise {den:.5}, offset {off:.5})", meta.step);
        }
        if let Some(dir) = opts.checkpoint_dir {
            if meta.step % config.checkpoint_every == 0 && meta.step < total {
                refiner_archive(&model, &opt, &meta, &opts.config_digest)?.save(dir)?;
                last_checkpoint = Some(dir.to_path_buf());
            }
        }
    }
    refiner_archive(&model, &opt, &meta, &opts.config_digest)
}

fn refiner_archive(model: &Refiner<f32>, opt: &Adam<f32>, meta: &TrainingMeta, digest: &str) -> Result<ParameterArchive> {
    let mut a = ParameterArchive::new(ArchiveKind::Refiner, &model.config, model.params.clone(), digest)?;
    a.manifest.training = meta.clone();
    a.set_optimizer(opt);
    Ok(a)
}

/// Load a refiner archive from disk.
pub fn load_refiner(dir: &Path) -> Result<Refiner<f32>> {
    Refiner::from_archive(&ParameterArchive::load(dir)?)
}
