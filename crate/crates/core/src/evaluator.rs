//! OCR-style evaluation harness.
//!
//! A small convolutional classifier is trained on modern renderings of every
//! category. Generated glyphs are ranked by class probability and scored by
//! top-k accuracy (one generation per item) and by cumulative top-1 success
//! over repeated generations with distinct seeds.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{params_digest, ArchiveKind, ParameterArchive, TrainingMeta};
use crate::error::{Error, Result};
use crate::glyph_data::GlyphCorpus;
use crate::graph::{Graph, Var};
use crate::image::{from_u8, to_u8, GlyphImage, Role};
use crate::nn::{Conv2d, GroupNorm, Init, Linear, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_KS: [usize; 4] = [1, 10, 20, 50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum rotation in radians.
    pub rotation: f64,
    /// Maximum relative scale change.
    pub scale: f64,
    /// Maximum translation as a fraction of the side.
    pub shift: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { rotation: 0.12, scale: 0.1, shift: 0.06, noise: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Side the grayscale input is resampled to before the network.
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub norm_groups: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    /// Minimum held-in accuracy; training fails below it.
    pub accuracy_bar: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            image_channels: 3,
            input_size: 32,
            widths: vec![16, 32, 64],
            norm_groups: 4,
            lr: 2e-3,
            batch_size: 32,
            epochs: 20,
            augment: AugmentConfig::default(),
            accuracy_bar: 0.99,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 3 || self.widths.contains(&0) {
            return Err(Error::Config("classifier needs three positive widths".into()));
        }
        if self.input_size % 8 != 0 || self.input_size == 0 || self.image_size == 0 {
            return Err(Error::Config(format!("classifier input size {} must be a positive multiple of 8", self.input_size)));
        }
        if self.batch_size == 0 || self.norm_groups == 0 || self.widths.iter().any(|w| w % self.norm_groups != 0) {
            return Err(Error::Config("classifier widths must be divisible by the group count".into()));
        }
        if !(0.0..=1.0).contains(&self.accuracy_bar) {
            return Err(Error::Config("accuracy bar must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Stored in the classifier archive alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub config: ClassifierConfig,
    pub categories: Vec<String>,
}

struct ClassifierNet {
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    head: Linear,
}

impl ClassifierNet {
    fn new<T: Scalar>(cfg: &ClassifierConfig, classes: usize, store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let mut init = Init::new(store, &mut r);
        let i = &mut init;
        let w = &cfg.widths;
        let convs = vec![
            Conv2d::new(i, "conv.0", 1, w[0], 3, 1),
            Conv2d::new(i, "conv.1", w[0], w[1], 3, 2),
            Conv2d::new(i, "conv.2", w[1], w[2], 3, 2),
            Conv2d::new(i, "conv.3", w[2], w[2], 3, 2),
        ];
        let norms = (0..3).map(|k| GroupNorm::new(i, &format!("norm.{k}"), w[k], cfg.norm_groups)).collect();
        let side = cfg.input_size / 8;
        let head = Linear::new(i, "head", w[2] * side * side, classes);
        Self { convs, norms, head }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        for (k, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, ps, h);
            if let Some(n) = self.norms.get(k) {
                h = n.forward(g, ps, h);
            }
            h = g.silu(h);
        }
        let n = g.shape(h)[0];
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat]);
        self.head.forward(g, ps, h)
    }
}

/// Category ranking of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    /// `(category, probability)`, best first.
    pub entries: Vec<(String, f64)>,
}

impl RankedPrediction {
    /// Sort `probs` (aligned with `categories`) descending; equal scores keep
    /// category order.
    pub fn from_probabilities(categories: &[String], probs: &[f64]) -> Result<Self> {
        if categories.len() != probs.len() || categories.is_empty() {
            return Err(Error::Shape(format!("{} categories, {} scores", categories.len(), probs.len())));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (total - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidArgument(format!("scores must be probabilities (sum {total})")));
        }
        let mut idx: Vec<usize> = (0..probs.len()).collect();
        idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        Ok(Self { entries: idx.into_iter().map(|i| (categories[i].clone(), probs[i])).collect() })
    }

    /// 1-based position of `category`, if ranked.
    pub fn position(&self, category: &str) -> Option<usize> {
        self.entries.iter().position(|(c, _)| c == category).map(|p| p + 1)
    }

    pub fn top(&self) -> &str {
        &self.entries[0].0
    }
}

/// Anything that ranks glyph images over a fixed category set.
pub trait Ranker {
    fn categories(&self) -> &[String];
    fn rank(&self, image: &GlyphImage) -> Result<RankedPrediction>;
    fn digest(&self) -> String;
}

pub struct Classifier {
    pub spec: ClassifierSpec,
    net: ClassifierNet,
    params: ParamStore<f32>,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, categories: Vec<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if categories.len() < 2 {
            return Err(Error::Data(format!("classifier needs at least 2 categories, got {}", categories.len())));
        }
        let mut params = ParamStore::new();
        let net = ClassifierNet::new(&config, categories.len(), &mut params, seed);
        Ok(Self { spec: ClassifierSpec { config, categories }, net, params })
    }

    pub fn from_archive(archive: &ParameterArchive) -> Result<Self> {
        archive.expect_kind(ArchiveKind::Classifier)?;
        let spec: ClassifierSpec = archive.config()?;
        let mut c = Self::new(spec.config, spec.categories, 0)?;
        c.params.load_from(&archive.params)?;
        Ok(c)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_archive(&ParameterArchive::load(dir)?)
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn input(&self, image: &GlyphImage) -> Result<Vec<f32>> {
        let c = &self.spec.config;
        if image.height() != c.image_size || image.width() != c.image_size {
            return Err(Error::Shape(format!(
                "classifier expects {0}x{0} images, got {1}x{2}",
                c.image_size,
                image.height(),
                image.width()
            )));
        }
        Ok(crate::image::area_resample(&image.gray(), c.image_size, c.input_size))
    }

    fn logits(&self, planes: &[Vec<f32>]) -> Tensor<f32> {
        let s = self.spec.config.input_size;
        let data: Vec<f32> = planes.concat();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[planes.len(), 1, s, s], data).expect("plane size"));
        let out = self.net.forward(&mut g, &self.params, x);
        g.value(out).clone()
    }

    fn predict_planes(&self, planes: &[Vec<f32>]) -> Vec<usize> {
        let mut out = Vec::with_capacity(planes.len());
        for chunk in planes.chunks(64) {
            let l = self.logits(chunk);
            let k = l.dim(1);
            for row in l.data().chunks(k) {
                out.push(argmax(row));
            }
        }
        out
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b as f64));
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl Ranker for Classifier {
    fn categories(&self) -> &[String] {
        &self.spec.categories
    }

    fn rank(&self, image: &GlyphImage) -> Result<RankedPrediction> {
        let plane = self.input(image)?;
        let l = self.logits(&[plane]);
        if !l.all_finite() {
            return Err(Error::NonFinite("classifier logits".into()));
        }
        RankedPrediction::from_probabilities(&self.spec.categories, &softmax_f64(l.data()))
    }

    fn digest(&self) -> String {
        params_digest(&self.params)
    }
}

/// Random affine warp plus pixel noise of a square grayscale plane.
pub fn augment(plane: &[f32], side: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    use rand::Rng as _;
    let mut u = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let rot = u(cfg.rotation);
    let sc = 1.0 + u(cfg.scale);
    let (ty, tx) = (u(cfg.shift) * side as f64, u(cfg.shift) * side as f64);
    let (cos, sin) = (rot.cos() / sc, rot.sin() / sc);
    let c = (side as f64 - 1.0) / 2.0;
    let read = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= side as isize || x >= side as isize {
            -1.0
        } else {
            plane[y as usize * side + x as usize] as f64
        }
    };
    let mut out = vec![0.0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            // Inverse map output pixel to source coordinates.
            let (dy, dx) = (y as f64 - c - ty, x as f64 - c - tx);
            let sy = cos * dy - sin * dx + c;
            let sx = sin * dy + cos * dx + c;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = read(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + read(y0, x0 + 1) * (1.0 - fy) * fx
                + read(y0 + 1, x0) * fy * (1.0 - fx)
                + read(y0 + 1, x0 + 1) * fy * fx;
            out[y * side + x] = v as f32;
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut out {
            *v += (cfg.noise * rng::normal::<f64, _>(rng)) as f32;
        }
    }
    out
}

/// Result of classifier training.
pub struct OcrTraining {
    pub archive: ParameterArchive,
    /// Accuracy over every held-in rendering.
    pub held_in_accuracy: f64,
    /// Accuracy over the canonical renderings only.
    pub canonical_accuracy: f64,
}

/// Train the classifier on every modern rendering of `corpus`.
pub fn train_ocr(corpus: &GlyphCorpus, config: &ClassifierConfig, seed: u64) -> Result<OcrTraining> {
    let categories = corpus.category_ids();
    let mut model = Classifier::new(config.clone(), categories.clone(), seed)?;
    let mut planes = Vec::new();
    let mut labels = Vec::new();
    let mut canonical = Vec::new();
    for (ci, cat) in corpus.categories.iter().enumerate() {
        let mut any = false;
        for n in cat.modern() {
            if n.image.role == Role::Condition {
                return Err(Error::Data(format!("ancient-script image among modern renderings of {}", cat.id)));
            }
            canonical.push(n.image.role == Role::Target);
            planes.push(model.input(&n.image)?);
            labels.push(ci);
            any = true;
        }
        if !any {
            return Err(Error::Data(format!("category {} has no modern rendering", cat.id)));
        }
    }
    let side = config.input_size;
    let mut opt = Adam::new(config.adam(), &model.params);
    let mut meta = TrainingMeta { seed, ..Default::default() };
    let mut order: Vec<usize> = (0..planes.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::substream(seed, "ocr-epoch", epoch as u64));
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut r = rng::substream(seed, "ocr-step", meta.step as u64);
            let mut data = Vec::with_capacity(chunk.len() * side * side);
            for &i in chunk {
                data.extend(augment(&planes[i], side, &config.augment, &mut r));
            }
            let mut g = Graph::new();
            let x = g.input(Tensor::new(&[chunk.len(), 1, side, side], data)?);
            let logits = model.net.forward(&mut g, &model.params, x);
            let loss = g.cross_entropy(logits, chunk.iter().map(|&i| labels[i]).collect());
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Divergence { step: meta.step, detail: format!("classifier loss {lv}") });
            }
            let grads = g.backward(loss).param_grads(&model.params);
            opt.step(&mut model.params, &grads);
            meta.step += 1;
            meta.loss_history.push(lv as f32);
            epoch_loss += lv;
            if b == 0 {
                debug!("ocr epoch {epoch} first-batch loss {lv:.4}");
            }
        }
        meta.epoch = epoch + 1;
        debug!("ocr epoch {epoch} mean loss {:.4}", epoch_loss / order.len().div_ceil(config.batch_size) as f64);
    }
    let preds = model.predict_planes(&planes);
    let correct: Vec<bool> = preds.iter().zip(&labels).map(|(p, l)| p == l).collect();
    let held_in_accuracy = correct.iter().filter(|c| **c).count() as f64 / correct.len() as f64;
    let (mut cc, mut cn) = (0usize, 0usize);
    for (ok, is_canon) in correct.iter().zip(&canonical) {
        if *is_canon {
            cn += 1;
            cc += *ok as usize;
        }
    }
    let canonical_accuracy = if cn == 0 { held_in_accuracy } else { cc as f64 / cn as f64 };
    info!("classifier held-in accuracy {held_in_accuracy:.4}, canonical {canonical_accuracy:.4}");
    if held_in_accuracy < config.accuracy_bar {
        return Err(Error::AcceptanceBar(format!(
            "classifier reached {:.2}% held-in accuracy, below the {:.2}% bar",
            100.0 * held_in_accuracy,
            100.0 * config.accuracy_bar
        )));
    }
    let spec = ClassifierSpec { config: config.clone(), categories };
    let mut archive = ParameterArchive::new(ArchiveKind::Classifier, &spec, model.params.clone(), "")?;
    archive.manifest.training = meta;
    Ok(OcrTraining { archive, held_in_accuracy, canonical_accuracy })
}

/// Maps a condition glyph to a generated modern glyph.
pub trait Decipherer {
    fn decipher(&self, condition: &GlyphImage, seed: u64) -> Result<GlyphImage>;
    /// Identifies the pipeline configuration and weights.
    fn digest(&self) -> String;
    /// Categories seen while training the pipeline.
    fn training_categories(&self) -> BTreeSet<String>;
}

/// One held-out condition glyph.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub category: String,
    pub name: String,
    pub image: GlyphImage,
}

/// Every condition glyph of `corpus`, in category then variant order.
pub fn eval_items(corpus: &GlyphCorpus) -> Vec<EvalItem> {
    corpus
        .categories
        .iter()
        .flat_map(|c| {
            c.conditions.iter().map(|n| EvalItem { category: c.id.clone(), name: format!("{}/{}", c.id, n.name), image: n.image.clone() })
        })
        .collect()
}

/// Seed used for item `index` under base seed `base`. Kept below 2^63 so
/// reports stay representable as TOML integers.
pub fn item_seed(base: u64, index: usize) -> u64 {
    use rand::RngCore;
    rng::substream(base, "eval-item", index as u64).next_u64() >> 1
}

/// Round-trip through 8-bit grayscale so fresh and cached generations match.
pub fn quantize(img: &GlyphImage) -> Result<GlyphImage> {
    let gray: Vec<f32> = img.gray().into_iter().map(|v| from_u8(to_u8(v))).collect();
    GlyphImage::from_gray(&gray, img.height(), img.width(), img.channels(), img.role, img.category.clone())
}

/// Memoizes generations per `(item, seed)`, optionally on disk as PNG.
pub struct CachedDecipherer<'a> {
    inner: &'a dyn Decipherer,
    dir: Option<PathBuf>,
    memo: Mutex<HashMap<(String, u64), GlyphImage>>,
    channels: usize,
}

impl<'a> CachedDecipherer<'a> {
    pub fn new(inner: &'a dyn Decipherer, dir: Option<PathBuf>, channels: usize) -> Self {
        Self { inner, dir, memo: Mutex::new(HashMap::new()), channels }
    }

    fn path(&self, name: &str, seed: u64) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{}_{seed:016x}.png", name.replace('/', "_"))))
    }

    pub fn generate(&self, item: &EvalItem, seed: u64) -> Result<GlyphImage> {
        let key = (item.name.clone(), seed);
        if let Some(img) = self.memo.lock().expect("cache lock").get(&key) {
            return Ok(img.clone());
        }
        let path = self.path(&item.name, seed);
        let img = match &path {
            Some(p) if p.exists() => {
                let (px, h, w) = crate::image::read_gray(p)?;
                let gray: Vec<f32> = px.into_iter().map(from_u8).collect();
                GlyphImage::from_gray(&gray, h, w, self.channels, Role::Generated, Some(item.category.clone()))?
            }
            _ => {
                let out = quantize(&self.inner.decipher(&item.image, seed)?)?;
                if let Some(p) = &path {
                    fs::create_dir_all(p.parent().expect("cache dir")).map_err(|e| Error::io(p, e))?;
                    out.save_png(p)?;
                }
                out
            }
        };
        self.memo.lock().expect("cache lock").insert(key, img.clone());
        Ok(img)
    }
}

impl Decipherer for CachedDecipherer<'_> {
    fn decipher(&self, condition: &GlyphImage, seed: u64) -> Result<GlyphImage> {
        quantize(&self.inner.decipher(condition, seed)?)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn training_categories(&self) -> BTreeSet<String> {
        self.inner.training_categories()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub category: String,
    pub name: String,
    pub seeds: Vec<u64>,
    /// 1-based rank of the true category for each trial.
    pub true_rank: Vec<usize>,
    pub top1: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub base_seeds: Vec<u64>,
    pub pipeline_digest: String,
    pub classifier_digest: String,
    pub items: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// Accuracy@k for the first trial, aligned with `ks`.
    pub top_k: Vec<f64>,
    /// Cumulative top-1 success after trials `1..=n`.
    pub cumulative: Vec<f64>,
    pub meta: ReportMeta,
    pub outcomes: Vec<ItemOutcome>,
}

impl EvalReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.top_k[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,index,value\n");
        for (k, v) in self.ks.iter().zip(&self.top_k) {
            let _ = writeln!(s, "top_k,{k},{v:.6}");
        }
        for (m, v) in self.cumulative.iter().enumerate() {
            let _ = writeln!(s, "cumulative_top1,{},{v:.6}", m + 1);
        }
        s
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("report serialization: {e}")))
    }

    /// Writes `<stem>.csv` and `<stem>.toml` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let doc = dir.join(format!("{stem}.toml"));
        fs::write(&doc, self.to_toml()?).map_err(|e| Error::io(&doc, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Checks the monotonicity and range invariants.
    pub fn check(&self) -> Result<()> {
        let in_range = |v: &f64| (0.0..=1.0).contains(v);
        if !self.top_k.iter().all(in_range) || !self.cumulative.iter().all(in_range) {
            return Err(Error::Data("accuracy outside [0, 1]".into()));
        }
        if self.top_k.windows(2).any(|w| w[1] < w[0]) || self.cumulative.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("report is not monotone".into()));
        }
        Ok(())
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) || ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("k list {ks:?} must be non-empty, positive and strictly increasing")));
    }
    Ok(())
}

/// Fails if any evaluated category was part of the pipeline's training data.
pub fn check_split(items: &[EvalItem], trained: &BTreeSet<String>) -> Result<()> {
    let evaluated: BTreeSet<&String> = items.iter().map(|i| &i.category).collect();
    let leaked = evaluated.iter().filter(|c| trained.contains(**c)).count();
    if leaked > 0 {
        return Err(Error::SplitLeak(leaked));
    }
    Ok(())
}

/// Runs every item once per base seed and scores the rankings.
pub fn evaluate_trials(
    items: &[EvalItem],
    pipeline: &CachedDecipherer<'_>,
    ranker: &dyn Ranker,
    ks: &[usize],
    base_seeds: &[u64],
) -> Result<EvalReport> {
    check_ks(ks)?;
    if items.is_empty() {
        return Err(Error::Data("no evaluation items".into()));
    }
    if base_seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    let distinct: BTreeSet<u64> = base_seeds.iter().copied().collect();
    if distinct.len() != base_seeds.len() {
        return Err(Error::InvalidArgument(format!("duplicate trial seeds in {base_seeds:?}")));
    }
    check_split(items, &pipeline.training_categories())?;
    let mut outcomes = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let mut o = ItemOutcome { category: item.category.clone(), name: item.name.clone(), seeds: vec![], true_rank: vec![], top1: vec![] };
        for &base in base_seeds {
            let seed = item_seed(base, i);
            let img = pipeline.generate(item, seed)?;
            let ranked = ranker.rank(&img)?;
            let pos = ranked
                .position(&item.category)
                .ok_or_else(|| Error::Data(format!("category {} unknown to the classifier", item.category)))?;
            o.seeds.push(seed);
            o.true_rank.push(pos);
            o.top1.push(ranked.top().to_string());
        }
        debug!("{}: ranks {:?}", item.name, o.true_rank);
        outcomes.push(o);
    }
    Ok(summarize(outcomes, ks, base_seeds, pipeline.digest(), ranker))
}

fn summarize(outcomes: Vec<ItemOutcome>, ks: &[usize], base_seeds: &[u64], pipeline_digest: String, ranker: &dyn Ranker) -> EvalReport {
    let n = outcomes.len() as f64;
    let top_k = ks.iter().map(|&k| outcomes.iter().filter(|o| o.true_rank[0] <= k).count() as f64 / n).collect();
    let cumulative = (1..=base_seeds.len())
        .map(|m| outcomes.iter().filter(|o| o.true_rank[..m].contains(&1)).count() as f64 / n)
        .collect();
    EvalReport {
        ks: ks.to_vec(),
        top_k,
        cumulative,
        meta: ReportMeta {
            base_seeds: base_seeds.to_vec(),
            pipeline_digest,
            classifier_digest: ranker.digest(),
            items: outcomes.len(),
            classes: ranker.categories().len(),
        },
        outcomes,
    }
}

/// One generation per item; accuracy@k for every `k`.
pub fn single_round_eval(
    items: &[EvalItem],
    pipeline: &CachedDecipherer<'_>,
    ranker: &dyn Ranker,
    ks: &[usize],
    seed: u64,
) -> Result<EvalReport> {
    evaluate_trials(items, pipeline, ranker, ks, &[seed])
}

/// `seeds.len()` generations per item; cumulative top-1 success per trial count.
pub fn multi_round_eval(items: &[EvalItem], pipeline: &CachedDecipherer<'_>, ranker: &dyn Ranker, seeds: &[u64]) -> Result<EvalReport> {
    evaluate_trials(items, pipeline, ranker, &[1], seeds)
}

/// Hex digest of arbitrary strings, used for pipeline identities.
pub fn digest_of(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph_data::{synth_corpus, SynthSpec};

    /// Ranks by a permutation seeded from the image bytes.
    struct RandomRanker(Vec<String>);

    impl Ranker for RandomRanker {
        fn categories(&self) -> &[String] {
            &self.0
        }
        fn rank(&self, image: &GlyphImage) -> Result<RankedPrediction> {
            let mut h = Sha256::new();
            for v in image.pixels().data() {
                h.update(v.to_le_bytes());
            }
            let seed = u64::from_le_bytes(h.finalize()[..8].try_into().unwrap());
            let mut probs: Vec<f64> = (1..=self.0.len()).map(|i| i as f64).collect();
            probs.shuffle(&mut rng::seeded(seed));
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            RankedPrediction::from_probabilities(&self.0, &probs)
        }
        fn digest(&self) -> String {
            "random".into()
        }
    }

    /// Puts all mass on the category encoded in the image's first pixel.
    struct PixelRanker(Vec<String>);

    impl Ranker for PixelRanker {
        fn categories(&self) -> &[String] {
            &self.0
        }
        fn rank(&self, image: &GlyphImage) -> Result<RankedPrediction> {
            let idx = to_u8(image.pixels().data()[0]) as usize % self.0.len();
            let mut probs = vec![0.0; self.0.len()];
            probs[idx] = 1.0;
            RankedPrediction::from_probabilities(&self.0, &probs)
        }
        fn digest(&self) -> String {
            "pixel".into()
        }
    }

    /// Emits noise, or with probability `p` an image encoding the true class.
    struct Stub {
        categories: Vec<String>,
        p: f64,
        trained: BTreeSet<String>,
    }

    impl Decipherer for Stub {
        fn decipher(&self, condition: &GlyphImage, seed: u64) -> Result<GlyphImage> {
            use rand::Rng as _;
            let mut r = rng::seeded(seed);
            let mut px = Tensor::<f32>::randn(&[1, 4, 4], &mut r).map(|v| (v * 0.5).clamp(-1.0, 1.0));
            let cat = condition.category.as_deref().unwrap();
            let truth = self.categories.iter().position(|c| c == cat).unwrap();
            let hit = r.random_bool(self.p);
            let mut idx = truth;
            if !hit {
                while idx == truth {
                    idx = rng::below(&mut r, self.categories.len());
                }
            }
            px.data_mut()[0] = from_u8(idx as u8);
            GlyphImage::new(px, Role::Generated, None)
        }
        fn digest(&self) -> String {
            "stub".into()
        }
        fn training_categories(&self) -> BTreeSet<String> {
            self.trained.clone()
        }
    }

    fn cats(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i:03}")).collect()
    }

    fn items(categories: &[String], per: usize) -> Vec<EvalItem> {
        let mut out = Vec::new();
        for c in categories {
            for v in 0..per {
                let img = GlyphImage::new(Tensor::full(&[1, 4, 4], -1.0), Role::Condition, Some(c.clone())).unwrap();
                out.push(EvalItem { category: c.clone(), name: format!("{c}/v{v}"), image: img });
            }
        }
        out
    }

    #[test]
    fn ranking_orders_and_breaks_ties_by_category_order() {
        let c = cats(4);
        let r = RankedPrediction::from_probabilities(&c, &[0.25, 0.4, 0.25, 0.1]).unwrap();
        let order: Vec<&str> = r.entries.iter().map(|e| e.0.as_str()).collect();
        assert_eq!(order, ["c001", "c000", "c002", "c003"]);
        assert_eq!(r.position("c002"), Some(3));
        assert!(RankedPrediction::from_probabilities(&c, &[0.5, 0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn random_ranking_gives_k_over_n() {
        let c = cats(100);
        let stub = Stub { categories: c.clone(), p: 0.0, trained: BTreeSet::new() };
        let cache = CachedDecipherer::new(&stub, None, 1);
        let its = items(&c, 20);
        let rep = single_round_eval(&its, &cache, &RandomRanker(c.clone()), &DEFAULT_KS, 1).unwrap();
        rep.check().unwrap();
        let n = its.len() as f64;
        for (&k, &acc) in rep.ks.iter().zip(&rep.top_k) {
            let p = k as f64 / 100.0;
            let se = (p * (1.0 - p) / n).sqrt();
            assert!((acc - p).abs() < 4.0 * se + 1e-9, "k {k}: {acc} vs {p}");
        }
    }

    #[test]
    fn stochastic_stub_matches_closed_form() {
        let c = cats(20);
        let stub = Stub { categories: c.clone(), p: 0.3, trained: BTreeSet::new() };
        let cache = CachedDecipherer::new(&stub, None, 1);
        let its = items(&c, 100);
        let rep = multi_round_eval(&its, &cache, &PixelRanker(c.clone()), &[11, 12, 13, 14, 15]).unwrap();
        rep.check().unwrap();
        let want = 1.0 - 0.7f64.powi(5);
        assert!((rep.cumulative[4] - want).abs() < 0.03, "{} vs {want}", rep.cumulative[4]);
        let single = single_round_eval(&its, &cache, &PixelRanker(c.clone()), &[1], 11).unwrap();
        assert_eq!(single.top_k[0], rep.cumulative[0]);
    }

    #[test]
    fn guards_reject_leaks_and_duplicate_seeds() {
        let c = cats(3);
        let stub = Stub { categories: c.clone(), p: 1.0, trained: [c[1].clone()].into_iter().collect() };
        let cache = CachedDecipherer::new(&stub, None, 1);
        let r = PixelRanker(c.clone());
        assert!(matches!(single_round_eval(&items(&c, 1), &cache, &r, &[1], 0), Err(Error::SplitLeak(1))));
        let clean = items(&c[..1], 2);
        assert!(multi_round_eval(&clean, &cache, &r, &[3, 3]).is_err());
        assert!(single_round_eval(&clean, &cache, &r, &[10, 1], 0).is_err());
        let rep = single_round_eval(&clean, &cache, &r, &[1, 2], 0).unwrap();
        assert_eq!(rep.top_k, vec![1.0, 1.0]);
    }

    #[test]
    fn cached_generations_reproduce_the_report() {
        let c = cats(10);
        let stub = Stub { categories: c.clone(), p: 0.5, trained: BTreeSet::new() };
        let dir = tempfile::tempdir().unwrap();
        let its = items(&c, 3);
        let r = PixelRanker(c.clone());
        let a = {
            let cache = CachedDecipherer::new(&stub, Some(dir.path().to_path_buf()), 1);
            multi_round_eval(&its, &cache, &r, &[1, 2, 3]).unwrap()
        };
        let never = Stub { categories: c.clone(), p: 0.0, trained: BTreeSet::new() };
        let cache = CachedDecipherer::new(&never, Some(dir.path().to_path_buf()), 1);
        let b = multi_round_eval(&its, &cache, &r, &[1, 2, 3]).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.outcomes, b.outcomes);
        let out = tempfile::tempdir().unwrap();
        a.write(out.path(), "report").unwrap();
        assert_eq!(EvalReport::load(&out.path().join("report.toml")).unwrap().to_toml().unwrap(), a.to_toml().unwrap());
    }

    #[test]
    fn classifier_separates_two_categories_and_round_trips() {
        let corpus = synth_corpus(&SynthSpec { categories: 2, variants: 1, styles: 2, seed: 3, image_size: 32, channels: 1 }).unwrap();
        let cfg = ClassifierConfig {
            image_size: 32,
            image_channels: 1,
            input_size: 16,
            widths: vec![4, 4, 4],
            norm_groups: 2,
            batch_size: 3,
            epochs: 30,
            lr: 5e-3,
            accuracy_bar: 1.0,
            ..Default::default()
        };
        let t = train_ocr(&corpus, &cfg, 1).unwrap();
        assert_eq!(t.held_in_accuracy, 1.0);
        let dir = tempfile::tempdir().unwrap();
        t.archive.save(dir.path()).unwrap();
        let a = Classifier::from_archive(&t.archive).unwrap();
        let b = Classifier::load(dir.path()).unwrap();
        for cat in &corpus.categories {
            let img = &cat.target.as_ref().unwrap().image;
            let (ra, rb) = (a.rank(img).unwrap(), b.rank(img).unwrap());
            assert_eq!(ra, rb);
            assert_eq!(ra.top(), cat.id);
            let s: f64 = ra.entries.iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert!(a.rank(&GlyphImage::new(Tensor::full(&[1, 8, 8], 0.0), Role::Generated, None).unwrap()).is_err());
    }

    #[test]
    fn accuracy_bar_failure_is_reported() {
        let corpus = synth_corpus(&SynthSpec { categories: 3, variants: 1, styles: 1, seed: 3, image_size: 16, channels: 1 }).unwrap();
        let cfg = ClassifierConfig {
            image_size: 16,
            image_channels: 1,
            input_size: 8,
            widths: vec![2, 2, 2],
            norm_groups: 1,
            epochs: 0,
            accuracy_bar: 1.0,
            ..Default::default()
        };
        assert!(matches!(train_ocr(&corpus, &cfg, 0), Err(Error::AcceptanceBar(_))));
    }

    #[test]
    fn augmentation_without_jitter_is_identity() {
        let plane: Vec<f32> = (0..64).map(|i| (i as f32 / 32.0) - 1.0).collect();
        let cfg = AugmentConfig { rotation: 0.0, scale: 0.0, shift: 0.0, noise: 0.0 };
        let out = augment(&plane, 8, &cfg, &mut rng::seeded(0));
        for (a, b) in out.iter().zip(&plane) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
