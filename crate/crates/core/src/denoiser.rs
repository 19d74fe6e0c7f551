//! Noise-prediction network and its patched training objective.
//!
//! The network is a three-level U-Net: residual blocks with sinusoidal
//! timestep embeddings at every level, strided-convolution downsampling,
//! nearest-neighbour upsampling with skip concatenation, and one
//! self-attention block at the coarsest resolution. The condition patch is
//! concatenated channel-wise onto the noisy patch.

use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveKind, ParameterArchive, TrainingMeta};
use crate::diffusion::{forward_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lss::PatchLayout;
use crate::nn::{timestep_embedding, Conv2d, GroupNorm, Init, Linear, ParamStore, ResBlock, SpatialAttention};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Side of the square training/inference patch in pixels.
    pub patch_size: usize,
    pub image_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; its length is the level count.
    pub channel_mults: Vec<usize>,
    pub time_embed_dim: usize,
    pub norm_groups: usize,
    pub attention: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            image_channels: 3,
            base_channels: 16,
            channel_mults: vec![1, 2, 4],
            time_embed_dim: 32,
            norm_groups: 8,
            attention: true,
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

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("image_channels", self.image_channels),
            ("base_channels", self.base_channels),
            ("time_embed_dim", self.time_embed_dim),
            ("norm_groups", self.norm_groups),
            ("batch_size", self.batch_size),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("denoiser.{name} must be positive")));
            }
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config("denoiser.channel_mults must be non-empty and positive".into()));
        }
        let down = 1usize << (self.channel_mults.len() - 1);
        if self.patch_size % down != 0 {
            return Err(Error::Config(format!(
                "patch size {} not divisible by {down} ({} levels)",
                self.patch_size,
                self.channel_mults.len()
            )));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, weight_decay: self.weight_decay }
    }
}

/// Noise estimator contract: maps a batch of noisy inputs, aligned condition
/// inputs (both `[N, C, H, W]`) and per-item timesteps to a noise estimate of
/// identical shape.
pub trait NoiseModel {
    /// Spatial side the model expects, or `None` if it accepts any size.
    fn patch_size(&self) -> Option<usize>;

    fn predict(&self, xt: &Tensor<f32>, cond: &Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>>;
}

/// Predict noise for a single `[C, p, p]` patch.
pub fn predict_noise<M: NoiseModel + ?Sized>(
    model: &M,
    xt_patch: &Tensor<f32>,
    cond_patch: &Tensor<f32>,
    t: usize,
) -> Result<Tensor<f32>> {
    xt_patch.ensure_same_shape(cond_patch)?;
    if xt_patch.ndim() != 3 {
        return Err(Error::Shape(format!("patch must be [C, H, W], got {:?}", xt_patch.shape())));
    }
    let shape = xt_patch.shape().to_vec();
    let xt = xt_patch.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
    let cond = cond_patch.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
    model.predict(&xt, &cond, &[t])?.reshape(&shape)
}

/// Models whose forward pass can be recorded on a [`Graph`] for training.
pub trait GraphDenoiser<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    fn forward(&self, g: &mut Graph<T>, xt: Var, cond: Var, ts: &[usize]) -> Var;
}

struct DownLevel {
    res: ResBlock,
    down: Option<Conv2d>,
}

struct UpLevel {
    res: ResBlock,
}

struct MidAttention {
    norm: GroupNorm,
    attn: SpatialAttention,
    proj: Linear,
}

/// U-Net parameter layout; values live in a separate [`ParamStore`].
pub struct UNet {
    time1: Linear,
    time2: Linear,
    temb_dim: usize,
    stem: Conv2d,
    down: Vec<DownLevel>,
    mid1: ResBlock,
    mid_attn: Option<MidAttention>,
    mid2: ResBlock,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new<T: Scalar>(cfg: &DenoiserConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let mut init = Init::new(store, &mut rng);
        let i = &mut init;
        let c = cfg.image_channels;
        let chans: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let tdim = cfg.time_embed_dim * 2;
        let groups = cfg.norm_groups;
        let time1 = Linear::new(i, "time.0", cfg.time_embed_dim, tdim);
        let time2 = Linear::new(i, "time.1", tdim, tdim);
        let stem = Conv2d::new(i, "stem", 2 * c, chans[0], 3, 1);
        let levels = chans.len();
        let down = (0..levels)
            .map(|l| DownLevel {
                res: ResBlock::new(i, &format!("down.{l}.res"), chans[l], chans[l], Some(tdim), groups),
                down: (l + 1 < levels).then(|| Conv2d::new(i, &format!("down.{l}.conv"), chans[l], chans[l + 1], 3, 2)),
            })
            .collect();
        let cm = chans[levels - 1];
        let mid1 = ResBlock::new(i, "mid.res1", cm, cm, Some(tdim), groups);
        let mid_attn = cfg.attention.then(|| MidAttention {
            norm: GroupNorm::new(i, "mid.attn.norm", cm, groups),
            attn: SpatialAttention::new(i, "mid.attn", cm, cm, cm, cm),
            proj: Linear::zeros(i, "mid.attn.proj", cm, cm),
        });
        let mid2 = ResBlock::new(i, "mid.res2", cm, cm, Some(tdim), groups);
        let up = (0..levels)
            .map(|l| {
                let from = if l + 1 < levels { chans[l + 1] } else { chans[l] };
                UpLevel { res: ResBlock::new(i, &format!("up.{l}.res"), from + chans[l], chans[l], Some(tdim), groups) }
            })
            .collect();
        let out_norm = GroupNorm::new(i, "out.norm", chans[0], groups);
        let out_conv = Conv2d::new(i, "out.conv", chans[0], c, 3, 1);
        UNet { time1, time2, temb_dim: cfg.time_embed_dim, stem, down, mid1, mid_attn, mid2, up, out_norm, out_conv }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, xt: Var, cond: Var, ts: &[usize]) -> Var {
        let temb = g.input(timestep_embedding(ts, self.temb_dim));
        let temb = self.time1.forward(g, ps, temb);
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, ps, temb);

        let x = g.concat_channels(xt, cond);
        let mut h = self.stem.forward(g, ps, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            h = lvl.res.forward(g, ps, h, Some(temb));
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(g, ps, h);
            }
        }
        h = self.mid1.forward(g, ps, h, Some(temb));
        if let Some(m) = &self.mid_attn {
            let s = g.shape(h).to_vec();
            let n = m.norm.forward(g, ps, h);
            let seq = SpatialAttention::flatten(g, n);
            let a = m.attn.forward(g, ps, seq, seq);
            let p = m.proj.forward(g, ps, a.attended);
            let p = SpatialAttention::unflatten(g, p, s[2], s[3]);
            h = g.add(h, p);
        }
        h = self.mid2.forward(g, ps, h, Some(temb));
        for (l, lvl) in self.up.iter().enumerate().rev() {
            if l + 1 < self.up.len() {
                h = g.upsample2(h);
            }
            h = g.concat_channels(h, skips[l]);
            h = lvl.res.forward(g, ps, h, Some(temb));
        }
        let h = self.out_norm.forward(g, ps, h);
        let h = g.silu(h);
        self.out_conv.forward(g, ps, h)
    }
}

/// Trained (or freshly initialized) conditional noise predictor.
pub struct Denoiser<T: Scalar = f32> {
    pub config: DenoiserConfig,
    net: UNet,
    params: ParamStore<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = UNet::new(&config, &mut params, seed);
        Ok(Self { config, net, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

impl Denoiser<f32> {
    pub fn from_archive(archive: &ParameterArchive) -> Result<Self> {
        archive.expect_kind(ArchiveKind::Denoiser)?;
        let config: DenoiserConfig = archive.config()?;
        let mut d = Self::new(config, 0)?;
        d.params.load_from(&archive.params)?;
        Ok(d)
    }
}

impl<T: Scalar> GraphDenoiser<T> for Denoiser<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph<T>, xt: Var, cond: Var, ts: &[usize]) -> Var {
        self.net.forward(g, &self.params, xt, cond, ts)
    }
}

impl NoiseModel for Denoiser<f32> {
    fn patch_size(&self) -> Option<usize> {
        Some(self.config.patch_size)
    }

    fn predict(&self, xt: &Tensor<f32>, cond: &Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>> {
        check_batch(xt, cond, ts, self.config.image_channels)?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite("denoiser parameters".into()));
        }
        let mut g = Graph::new();
        let x = g.input(xt.clone());
        let c = g.input(cond.clone());
        let out = self.forward(&mut g, x, c, ts);
        Ok(g.value(out).clone())
    }
}

pub(crate) fn check_batch(xt: &Tensor<f32>, cond: &Tensor<f32>, ts: &[usize], channels: usize) -> Result<()> {
    xt.ensure_same_shape(cond)?;
    if xt.ndim() != 4 || xt.dim(1) != channels {
        return Err(Error::Shape(format!("expected [N, {channels}, H, W], got {:?}", xt.shape())));
    }
    if ts.len() != xt.dim(0) {
        return Err(Error::Shape(format!("{} timesteps for batch of {}", ts.len(), xt.dim(0))));
    }
    Ok(())
}

/// One aligned training example: clean target crop and condition crop.
#[derive(Clone, Debug)]
pub struct PatchPair {
    pub target: Tensor<f32>,
    pub cond: Tensor<f32>,
}

/// Noised batch ready for the objective.
pub struct NoisedBatch<T: Scalar> {
    pub xt: Tensor<T>,
    pub cond: Tensor<T>,
    pub eps: Tensor<T>,
    pub ts: Vec<usize>,
}

/// Draw `t ~ U{1..T}` and `eps ~ N(0, I)` per item and form `X_t`.
pub fn noise_batch<T: Scalar>(batch: &[PatchPair], sched: &NoiseSchedule, rng: &mut Rng) -> Result<NoisedBatch<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut xts = Vec::with_capacity(batch.len());
    let mut epss = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for p in batch {
        p.target.ensure_same_shape(&p.cond)?;
        let t = 1 + rng::below(rng, sched.steps());
        let eps = Tensor::<T>::randn(p.target.shape(), rng);
        let x0: Tensor<T> = p.target.cast();
        xts.push(forward_sample(&x0, t, &eps, sched)?);
        epss.push(eps);
        ts.push(t);
    }
    let conds: Vec<Tensor<T>> = batch.iter().map(|p| p.cond.cast()).collect();
    Ok(NoisedBatch {
        xt: Tensor::stack(&xts.iter().collect::<Vec<_>>())?,
        cond: Tensor::stack(&conds.iter().collect::<Vec<_>>())?,
        eps: Tensor::stack(&epss.iter().collect::<Vec<_>>())?,
        ts,
    })
}

/// Mean squared error between predicted and true noise; returns the loss
/// and per-parameter gradients.
pub fn objective<T: Scalar, M: GraphDenoiser<T> + ?Sized>(model: &M, batch: &NoisedBatch<T>) -> (f64, Vec<Tensor<T>>) {
    let mut g = Graph::new();
    let xt = g.input(batch.xt.clone());
    let cond = g.input(batch.cond.clone());
    let pred = model.forward(&mut g, xt, cond, &batch.ts);
    let loss = g.mse_loss(pred, batch.eps.clone());
    let grads = g.backward(loss);
    (g.value(loss).item().to_f64(), grads.param_grads(model.params()))
}

/// Sample noise, evaluate the objective and take one optimizer step.
pub fn training_step<T: Scalar, M: GraphDenoiser<T> + ?Sized>(
    model: &mut M,
    opt: &mut Adam<T>,
    batch: &[PatchPair],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let noised = noise_batch(batch, sched, rng)?;
    let (loss, grads) = objective(model, &noised);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    opt.step(model.params_mut(), &grads);
    Ok(loss)
}

/// Aligned image pair from which training crops are drawn.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub target: Tensor<f32>,
    pub cond: Tensor<f32>,
}

pub struct TrainOptions<'a> {
    pub seed: u64,
    pub checkpoint_dir: Option<&'a Path>,
    pub resume: Option<ParameterArchive>,
    /// Digest of the run configuration, recorded in every archive.
    pub config_digest: String,
}

impl TrainOptions<'_> {
    pub fn new(seed: u64) -> Self {
        Self { seed, checkpoint_dir: None, resume: None, config_digest: String::new() }
    }
}

/// Number of optimizer steps a configuration implies for `n_pairs` pairs.
pub fn planned_steps(n_pairs: usize, batch_size: usize, epochs: usize, max_steps: Option<usize>) -> usize {
    max_steps.unwrap_or_else(|| epochs * n_pairs.div_ceil(batch_size))
}

/// Deterministic pair index for global step `step` (per-epoch shuffles).
pub(crate) fn batch_indices(seed: u64, n: usize, batch: usize, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch);
    let epoch = step / per_epoch;
    let within = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "epoch-order", epoch as u64));
    order.iter().skip(within * batch).take(batch).copied().collect()
}

/// Train the initial-decipherment denoiser on random aligned crops of
/// many-to-one image pairs.
pub fn train_initial(
    pairs: &[ImagePair],
    config: &DenoiserConfig,
    layout: &PatchLayout,
    sched: &NoiseSchedule,
    opts: TrainOptions<'_>,
) -> Result<ParameterArchive> {
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if layout.patch != config.patch_size {
        return Err(Error::Config(format!(
            "layout patch {} differs from denoiser patch {}",
            layout.patch, config.patch_size
        )));
    }
    let total = planned_steps(pairs.len(), config.batch_size, config.epochs, config.max_steps);
    let mut model = Denoiser::<f32>::new(config.clone(), opts.seed)?;
    let mut opt = Adam::new(config.adam(), model.params());
    let mut meta = TrainingMeta { seed: opts.seed, ..Default::default() };
    if let Some(prev) = &opts.resume {
        model.params.load_from(&prev.params)?;
        if let Some(o) = prev.optimizer(config.adam())? {
            opt = o;
        }
        meta = prev.manifest.training.clone();
        info!("resuming denoiser training at step {}", meta.step);
    }
    let steps_per_epoch = pairs.len().div_ceil(config.batch_size);
    let mut last_checkpoint: Option<PathBuf> = None;
    while meta.step < total {
        let step = meta.step;
        let mut rng = rng::substream(opts.seed, "denoiser-step", step as u64);
        let batch: Vec<PatchPair> = batch_indices(opts.seed, pairs.len(), config.batch_size, step)
            .into_iter()
            .map(|i| {
                let d = rng::below(&mut rng, layout.count());
                let (top, left) = layout.origin(d);
                let p = layout.patch;
                Ok(PatchPair { target: pairs[i].target.crop(top, left, p, p)?, cond: pairs[i].cond.crop(top, left, p, p)? })
            })
            .collect::<Result<_>>()?;
        let loss = match training_step(&mut model, &mut opt, &batch, sched, &mut rng) {
            Ok(l) => l,
            Err(Error::NonFinite(detail)) => {
                let detail = match &last_checkpoint {
                    Some(p) => format!("{detail}; last good checkpoint at {}", p.display()),
                    None => detail,
                };
                return Err(Error::Divergence { step, detail });
            }
            Err(e) => return Err(e),
        };
        meta.step += 1;
        meta.epoch = meta.step / steps_per_epoch;
        meta.loss_history.push(loss as f32);
        if meta.step % 50 == 0 {
            debug!("denoiser step {} loss {loss:.5}", meta.step);
        }
        if let Some(dir) = opts.checkpoint_dir {
            if meta.step % config.checkpoint_every == 0 && meta.step < total {
                let arch = denoiser_archive(&model, &opt, &meta, &opts.config_digest)?;
                arch.save(dir)?;
                last_checkpoint = Some(dir.to_path_buf());
            }
        }
    }
    denoiser_archive(&model, &opt, &meta, &opts.config_digest)
}

fn denoiser_archive(model: &Denoiser<f32>, opt: &Adam<f32>, meta: &TrainingMeta, digest: &str) -> Result<ParameterArchive> {
    let mut a = ParameterArchive::new(ArchiveKind::Denoiser, &model.config, model.params.clone(), digest)?;
    a.manifest.training = meta.clone();
    a.set_optimizer(opt);
    Ok(a)
}
