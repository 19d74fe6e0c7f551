//! End-to-end orchestration: corpus preparation, model training, the
//! decipher pipeline (initial sample, optional refinement) and the
//! three-arm ablation.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use log::info;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::archive::{params_digest, ArchiveKind, ParameterArchive};
use crate::config::{DataSource, RunConfig};
use crate::denoiser::{train_initial, Denoiser, DenoiserConfig, ImagePair, TrainOptions};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::evaluator::{
    digest_of, eval_items, evaluate_trials, train_ocr, CachedDecipherer, Classifier, Decipherer, EvalItem, Ranker,
};
use crate::glyph_data::{
    common_styles, ingest, make_many_to_one_pairs, make_one_to_one_font_pairs, split_categories, synth_corpus, GlyphCorpus,
    IngestOptions, SplitSpec, TrainingPair, CANONICAL_STYLE,
};
use crate::image::{GlyphImage, Role};
use crate::lss::{build_patch_layout, lss_sample, sample_whole, PatchLayout};
use crate::refiner::{train_refiner, Refiner};
use crate::rng::{self, GaussianNoise};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Patched sampling with overlap averaging.
    Lss,
    /// One network call on the whole image per step.
    Whole,
}

impl FromStr for SamplerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lss" => Ok(Self::Lss),
            "whole" => Ok(Self::Whole),
            other => Err(Error::InvalidArgument(format!("unknown sampler mode {other:?} (lss | whole)"))),
        }
    }
}

impl SamplerMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Lss => "lss",
            Self::Whole => "whole",
        }
    }
}

/// Corpus plus its category-disjoint split.
pub struct Prepared {
    pub corpus: GlyphCorpus,
    pub train: GlyphCorpus,
    pub test: GlyphCorpus,
    pub split: SplitSpec,
}

pub fn load_corpus(cfg: &RunConfig) -> Result<GlyphCorpus> {
    match &cfg.data.source {
        DataSource::Synthetic(spec) => synth_corpus(spec),
        DataSource::Real { path, invert } => {
            ingest(path, &IngestOptions { image_size: cfg.image_size, channels: cfg.channels, invert: *invert })
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let corpus = load_corpus(cfg)?;
    let (train, test, split) = split_categories(&corpus, cfg.data.test_fraction, cfg.seed)?;
    info!("corpus {} categories: {} train, {} test", corpus.categories.len(), split.train.len(), split.test.len());
    Ok(Prepared { corpus, train, test, split })
}

pub fn layout_for(cfg: &RunConfig, mode: SamplerMode) -> Result<PatchLayout> {
    match mode {
        SamplerMode::Lss => build_patch_layout(cfg.image_size, cfg.image_size, cfg.patch_size, cfg.stride),
        SamplerMode::Whole => build_patch_layout(cfg.image_size, cfg.image_size, cfg.image_size, cfg.image_size),
    }
}

pub fn denoiser_config_for(cfg: &RunConfig, mode: SamplerMode) -> DenoiserConfig {
    match mode {
        SamplerMode::Lss => cfg.denoiser.clone(),
        SamplerMode::Whole => cfg.whole_image_denoiser(),
    }
}

/// Train the initial model on many-to-one pairs of the train split.
pub fn train_initial_model(cfg: &RunConfig, train: &GlyphCorpus, mode: SamplerMode, mut opts: TrainOptions<'_>) -> Result<ParameterArchive> {
    let pairs: Vec<ImagePair> = make_many_to_one_pairs(train)?
        .into_iter()
        .map(|p| ImagePair { target: p.target.into_pixels(), cond: p.condition.into_pixels() })
        .collect();
    if opts.config_digest.is_empty() {
        opts.config_digest = cfg.digest()?;
    }
    let sched = cfg.schedule.build()?;
    let mut archive = train_initial(&pairs, &denoiser_config_for(cfg, mode), &layout_for(cfg, mode)?, &sched, opts)?;
    archive.manifest.trained_categories = train.category_ids();
    Ok(archive)
}

/// Font-to-font pairs (every non-canonical style to the canonical one) and
/// the canonical reference pool.
pub fn refiner_data(train: &GlyphCorpus) -> Result<(Vec<TrainingPair>, Vec<GlyphImage>)> {
    let styles: Vec<String> = common_styles(train).into_iter().filter(|s| s != CANONICAL_STYLE).collect();
    if styles.is_empty() {
        return Err(Error::Data("refiner training needs at least one non-canonical style".into()));
    }
    let pairs = make_one_to_one_font_pairs(train, &styles, CANONICAL_STYLE)?;
    let refs = train.categories.iter().filter_map(|c| c.target.as_ref().map(|t| t.image.clone())).collect();
    Ok((pairs, refs))
}

pub fn train_refiner_model(cfg: &RunConfig, train: &GlyphCorpus, mut opts: TrainOptions<'_>) -> Result<ParameterArchive> {
    let (pairs, refs) = refiner_data(train)?;
    if opts.config_digest.is_empty() {
        opts.config_digest = cfg.digest()?;
    }
    let mut archive = train_refiner(&pairs, &refs, &cfg.refiner, opts)?;
    archive.manifest.trained_categories = train.category_ids();
    Ok(archive)
}

/// Style exemplar used as the refiner reference at decipher time: the
/// canonical rendering of the first train category.
pub fn exemplar(train: &GlyphCorpus) -> Result<GlyphImage> {
    train
        .categories
        .iter()
        .find_map(|c| c.target.as_ref())
        .map(|t| t.image.clone().with_role(Role::StyleReference))
        .ok_or_else(|| Error::Data("no canonical rendering available for the refiner reference".into()))
}

const REFERENCE_FILE: &str = "reference.png";

/// Store the refiner's style reference next to its archive.
pub fn save_reference(dir: &Path, reference: &GlyphImage) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    reference.save_png(&dir.join(REFERENCE_FILE))
}

pub fn load_reference(dir: &Path, channels: usize) -> Result<GlyphImage> {
    let p = dir.join(REFERENCE_FILE);
    if !p.exists() {
        return Err(Error::Data(format!("refiner reference {} missing", p.display())));
    }
    let (px, h, w) = crate::image::read_gray(&p)?;
    let gray: Vec<f32> = px.into_iter().map(crate::image::from_u8).collect();
    GlyphImage::from_gray(&gray, h, w, channels, Role::StyleReference, None)
}

/// Seed of the refinement stage for a candidate seed.
pub fn refine_seed(seed: u64) -> u64 {
    rng::substream(seed, "refine", 0).next_u64()
}

type SampleMemo = Arc<Mutex<HashMap<(String, String, u64), GlyphImage>>>;

/// Initial model plus optional refiner.
pub struct Pipeline {
    pub mode: SamplerMode,
    denoiser: Denoiser<f32>,
    sched: NoiseSchedule,
    layout: PatchLayout,
    refiner: Option<(Refiner<f32>, GlyphImage)>,
    trained: BTreeSet<String>,
    digest: String,
    initial_digest: String,
    memo: Option<SampleMemo>,
}

impl Pipeline {
    pub fn new(cfg: &RunConfig, mode: SamplerMode, initial: &ParameterArchive, refiner: Option<(&ParameterArchive, GlyphImage)>) -> Result<Self> {
        let denoiser = Denoiser::from_archive(initial)?;
        let expected = denoiser_config_for(cfg, mode);
        if denoiser.config.patch_size != expected.patch_size {
            return Err(Error::Config(format!(
                "archive patch size {} does not fit {} sampling (expected {})",
                denoiser.config.patch_size,
                mode.as_str(),
                expected.patch_size
            )));
        }
        let mut trained: BTreeSet<String> = initial.manifest.trained_categories.iter().cloned().collect();
        let mut parts = vec![mode.as_str().to_string(), params_digest(&initial.params), cfg.digest()?];
        let initial_digest = digest_of(&[&parts[0], &parts[1], &parts[2]]);
        let refiner = match refiner {
            Some((arch, reference)) => {
                trained.extend(arch.manifest.trained_categories.iter().cloned());
                parts.push(params_digest(&arch.params));
                Some((Refiner::from_archive(arch)?, reference))
            }
            None => None,
        };
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        Ok(Self {
            mode,
            denoiser,
            sched: cfg.schedule.build()?,
            layout: layout_for(cfg, mode)?,
            refiner,
            trained,
            digest: digest_of(&refs),
            initial_digest,
            memo: None,
        })
    }

    /// Share initial samples with other pipelines built on the same model.
    pub fn with_memo(mut self, memo: SampleMemo) -> Self {
        self.memo = Some(memo);
        self
    }

    pub fn new_memo() -> SampleMemo {
        Arc::new(Mutex::new(HashMap::new()))
    }

    pub fn has_refiner(&self) -> bool {
        self.refiner.is_some()
    }

    /// Raw initial decipherment.
    pub fn initial(&self, condition: &GlyphImage, seed: u64) -> Result<GlyphImage> {
        let key = (self.initial_digest.clone(), pixel_digest(condition), seed);
        if let Some(m) = &self.memo {
            if let Some(img) = m.lock().expect("memo lock").get(&key) {
                return Ok(img.clone());
            }
        }
        let mut noise = GaussianNoise::new(seed);
        let img = match self.mode {
            SamplerMode::Lss => lss_sample(condition, &self.denoiser, &self.sched, &self.layout, &mut noise)?,
            SamplerMode::Whole => sample_whole(condition, &self.denoiser, &self.sched, &mut noise)?,
        };
        if let Some(m) = &self.memo {
            m.lock().expect("memo lock").insert(key, img.clone());
        }
        Ok(img)
    }

    /// Initial decipherment followed by refinement when a refiner is loaded.
    pub fn run(&self, condition: &GlyphImage, seed: u64, refine: bool) -> Result<GlyphImage> {
        let x0 = self.initial(condition, seed)?;
        match (&self.refiner, refine) {
            (Some((r, reference)), true) => r.refine(&x0, reference, refine_seed(seed)),
            _ => Ok(x0),
        }
    }
}

fn pixel_digest(img: &GlyphImage) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in img.pixels().data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Decipherer for Pipeline {
    fn decipher(&self, condition: &GlyphImage, seed: u64) -> Result<GlyphImage> {
        self.run(condition, seed, true)
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }

    fn training_categories(&self) -> BTreeSet<String> {
        self.trained.clone()
    }
}

/// Items for multi-round evaluation: the first `variants` conditions of
/// every category (all when `None`).
pub fn multi_round_items(items: &[EvalItem], variants: Option<usize>) -> Vec<EvalItem> {
    let Some(v) = variants else { return items.to_vec() };
    let mut seen: HashMap<&str, usize> = HashMap::new();
    items
        .iter()
        .filter(|it| {
            let n = seen.entry(it.category.as_str()).or_default();
            *n += 1;
            *n <= v
        })
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub name: String,
    pub mode: SamplerMode,
    pub refine: bool,
    pub training_seed: u64,
    pub step_budget: usize,
    pub steps_trained: usize,
    pub refiner_steps: usize,
    pub pipeline_digest: String,
    pub ks: Vec<usize>,
    pub top_k: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_digest: String,
    pub corpus_digest: String,
    pub categories: usize,
    pub train_categories: usize,
    pub test_categories: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub eval_seed: u64,
    pub classifier_digest: String,
    pub classifier_accuracy: f64,
    pub arms: Vec<ArmSummary>,
    pub multi_round_items: usize,
    pub multi_round_seeds: Vec<u64>,
    pub multi_round_cumulative: Vec<f64>,
}

/// One directional check of the ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.name == name)
    }

    fn at(&self, name: &str, k: usize) -> Result<f64> {
        let a = self.arm(name).ok_or_else(|| Error::Data(format!("ablation arm {name} missing")))?;
        a.ks.iter()
            .position(|&x| x == k)
            .map(|i| a.top_k[i])
            .ok_or_else(|| Error::Data(format!("arm {name} has no top-{k} entry")))
    }

    /// Ordering checks: whole < patched by at least 10 points at top-10,
    /// refined no worse than patched minus 2 points at top-1, and 5-trial
    /// cumulative success at least the single-round top-1.
    pub fn checks(&self) -> Result<Vec<Check>> {
        let (w10, l10) = (self.at("whole", 10)?, self.at("lss", 10)?);
        let (l1, r1) = (self.at("lss", 1)?, self.at("lss_refine", 1)?);
        let budgets: BTreeSet<usize> = self.arms.iter().map(|a| a.step_budget).collect();
        let trained: BTreeSet<usize> = self.arms.iter().map(|a| a.steps_trained).collect();
        let cum5 = self.multi_round_cumulative.get(4).copied();
        let first = self.multi_round_cumulative.first().copied().unwrap_or(f64::NAN);
        Ok(vec![
            Check {
                name: "equal step budgets".into(),
                passed: budgets.len() == 1 && trained.len() == 1,
                detail: format!("budgets {budgets:?}, trained {trained:?}"),
            },
            Check {
                name: "top-10 whole < lss by >= 10 points".into(),
                passed: l10 - w10 >= 0.10 - 1e-12,
                detail: format!("whole {:.1}%, lss {:.1}%", 100.0 * w10, 100.0 * l10),
            },
            Check {
                name: "top-1 refine >= lss - 2 points".into(),
                passed: r1 >= l1 - 0.02 - 1e-12,
                detail: format!("lss {:.1}%, lss+refine {:.1}%", 100.0 * l1, 100.0 * r1),
            },
            Check {
                name: "5-trial cumulative >= single-round top-1".into(),
                passed: cum5.is_some_and(|c| c >= first),
                detail: format!("trial 1 {:.1}%, trial 5 {}", 100.0 * first, cum5.map_or("missing".into(), |c| format!("{:.1}%", 100.0 * c))),
            },
        ])
    }

    /// Comparison table, one row per arm.
    pub fn table(&self) -> String {
        let mut s = String::from("arm");
        if let Some(a) = self.arms.first() {
            for k in &a.ks {
                let _ = write!(s, ",top_{k}");
            }
        }
        s.push('\n');
        for a in &self.arms {
            s.push_str(&a.name);
            for v in &a.top_k {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("ablation.csv");
        fs::write(&p, self.table()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("ablation.toml");
        let text = toml::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Load `dir` if it holds an archive of `kind` trained under `digest`.
fn reuse(dir: &Path, kind: ArchiveKind, digest: &str) -> Result<Option<ParameterArchive>> {
    if !dir.join("manifest.toml").exists() {
        return Ok(None);
    }
    let a = ParameterArchive::load(dir)?;
    a.expect_kind(kind)?;
    if a.manifest.config_digest != digest {
        return Err(Error::Config(format!("{} was produced by a different configuration", dir.display())));
    }
    Ok(Some(a))
}

/// Train (or resume) one model stage, checkpointing into `dir`.
fn stage(
    dir: &Path,
    kind: ArchiveKind,
    digest: &str,
    seed: u64,
    total: usize,
    train: impl FnOnce(TrainOptions<'_>) -> Result<ParameterArchive>,
) -> Result<ParameterArchive> {
    let prev = reuse(dir, kind, digest)?;
    if let Some(a) = &prev {
        if a.manifest.training.step >= total {
            info!("reusing {}", dir.display());
            return Ok(prev.unwrap());
        }
    }
    let opts = TrainOptions { seed, checkpoint_dir: Some(dir), resume: prev, config_digest: digest.to_string() };
    let a = train(opts)?;
    a.save(dir)?;
    Ok(a)
}

/// Train every arm under identical data, seeds and budgets, then evaluate.
/// Artifacts land in `out`; completed stages are reused on rerun.
pub fn run_ablation(cfg: &RunConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let digest = cfg.digest()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.save(&out.join("config.toml"))?;
    let prep = prepare(cfg)?;
    let corpus_digest = prep.corpus.digest();
    prep.split_check()?;

    let clf_dir = out.join("classifier");
    let (classifier, clf_acc) = match reuse(&clf_dir, ArchiveKind::Classifier, &digest)? {
        Some(a) => (Classifier::from_archive(&a)?, classifier_accuracy(&a)),
        None => {
            let mut t = train_ocr(&prep.corpus, &cfg.classifier, cfg.seed)?;
            t.archive.manifest.config_digest = digest.clone();
            t.archive.manifest.config.insert("held_in_accuracy".into(), toml::Value::Float(t.held_in_accuracy));
            t.archive.save(&clf_dir)?;
            (Classifier::from_archive(&t.archive)?, t.held_in_accuracy)
        }
    };

    let pairs = make_many_to_one_pairs(&prep.train)?.len();
    let budget_of = |d: &DenoiserConfig| crate::denoiser::planned_steps(pairs, d.batch_size, d.epochs, d.max_steps);
    let mut initial = HashMap::new();
    for mode in [SamplerMode::Whole, SamplerMode::Lss] {
        let dir = out.join(format!("initial_{}", mode.as_str()));
        let total = budget_of(&denoiser_config_for(cfg, mode));
        info!("training {} initial model for {total} steps", mode.as_str());
        let a = stage(&dir, ArchiveKind::Denoiser, &digest, cfg.seed, total, |o| train_initial_model(cfg, &prep.train, mode, o))?;
        initial.insert(mode, a);
    }
    let (rpairs, _) = refiner_data(&prep.train)?;
    let rtotal = crate::denoiser::planned_steps(rpairs.len(), cfg.refiner.batch_size, cfg.refiner.epochs, cfg.refiner.max_steps);
    info!("training refiner for {rtotal} steps");
    let refiner = stage(&out.join("refiner"), ArchiveKind::Refiner, &digest, cfg.seed, rtotal, |o| {
        train_refiner_model(cfg, &prep.train, o)
    })?;
    save_reference(&out.join("refiner"), &exemplar(&prep.train)?)?;

    let items = eval_items(&prep.test);
    let reference = exemplar(&prep.train)?;
    let memo = Pipeline::new_memo();
    let arms = [("whole", SamplerMode::Whole, false), ("lss", SamplerMode::Lss, false), ("lss_refine", SamplerMode::Lss, true)];
    let mut summaries = Vec::new();
    let mut multi = None;
    for (name, mode, refine) in arms {
        let arch = &initial[&mode];
        let r = refine.then(|| (&refiner, reference.clone()));
        let p = Pipeline::new(cfg, mode, arch, r)?.with_memo(memo.clone());
        let cache = CachedDecipherer::new(&p, Some(out.join("generations").join(name)), cfg.channels);
        info!("evaluating arm {name} on {} items", items.len());
        let rep = evaluate_trials(&items, &cache, &classifier, &cfg.eval.ks, &[cfg.eval.seed])?;
        rep.check()?;
        rep.write(&out.join("reports"), name)?;
        if refine {
            let sub = multi_round_items(&items, cfg.eval.multi_round_variants);
            info!("multi-round evaluation of {name} on {} items", sub.len());
            let m = evaluate_trials(&sub, &cache, &classifier, &[1], &cfg.eval.trial_seeds())?;
            m.check()?;
            m.write(&out.join("reports"), &format!("{name}_multi_round"))?;
            multi = Some(m);
        }
        summaries.push(ArmSummary {
            name: name.to_string(),
            mode,
            refine,
            training_seed: cfg.seed,
            step_budget: budget_of(&denoiser_config_for(cfg, mode)),
            steps_trained: arch.manifest.training.step,
            refiner_steps: if refine { refiner.manifest.training.step } else { 0 },
            pipeline_digest: Decipherer::digest(&p),
            ks: rep.ks.clone(),
            top_k: rep.top_k.clone(),
        });
    }
    let multi = multi.expect("refined arm evaluated");
    let report = AblationReport {
        config_digest: digest,
        corpus_digest,
        categories: prep.corpus.categories.len(),
        train_categories: prep.split.train.len(),
        test_categories: prep.split.test.len(),
        image_size: cfg.image_size,
        patch_size: cfg.patch_size,
        stride: cfg.stride,
        eval_seed: cfg.eval.seed,
        classifier_digest: classifier.digest(),
        classifier_accuracy: clf_acc,
        arms: summaries,
        multi_round_items: multi.meta.items,
        multi_round_seeds: multi.meta.base_seeds.clone(),
        multi_round_cumulative: multi.cumulative.clone(),
    };
    report.write(out)?;
    Ok(report)
}

fn classifier_accuracy(a: &ParameterArchive) -> f64 {
    a.manifest.config.get("held_in_accuracy").and_then(toml::Value::as_float).unwrap_or(f64::NAN)
}

impl Prepared {
    /// The split must be category-disjoint and cover the corpus.
    pub fn split_check(&self) -> Result<()> {
        let train = self.split.train_set();
        let leaked = self.split.test.iter().filter(|c| train.contains(*c)).count();
        if leaked > 0 {
            return Err(Error::SplitLeak(leaked));
        }
        Ok(())
    }
}

/// Ranked candidates for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub seed: u64,
    pub file: String,
    pub top: Vec<(String, f64)>,
}

/// Read an image file as a condition glyph: grayscale, padded to a square
/// with white and resized to `size`.
pub fn load_condition(path: &Path, size: usize, channels: usize) -> Result<GlyphImage> {
    let (px, h, w) = crate::image::read_gray(path)?;
    let gray: Vec<f32> = px.iter().map(|&v| crate::image::from_u8(v)).collect();
    let resized = crate::image::pad_and_resize(&gray, h, w, size, -1.0);
    GlyphImage::from_gray(&resized, size, size, channels, Role::Condition, None)
}

/// Writes `<dir>/<stem>_<i>.png` candidates and returns their rankings.
pub fn decipher_candidates(
    pipeline: &Pipeline,
    ranker: Option<&dyn Ranker>,
    condition: &GlyphImage,
    seeds: &[u64],
    refine: bool,
    dir: &Path,
    stem: &str,
) -> Result<(Vec<GlyphImage>, Vec<Candidate>)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::new();
    let mut cands = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let img = pipeline.run(condition, seed, refine)?;
        let file = format!("{stem}_{i:02}.png");
        img.save_png(&dir.join(&file))?;
        let top = match ranker {
            Some(r) => r.rank(&crate::evaluator::quantize(&img)?)?.entries.into_iter().take(5).collect(),
            None => Vec::new(),
        };
        images.push(img);
        cands.push(Candidate { seed, file, top });
    }
    Ok((images, cands))
}

/// One row per input, one column per candidate, 8-bit grayscale PNG.
pub fn write_montage(rows: &[Vec<GlyphImage>], path: &Path) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::InvalidArgument("empty montage".into()));
    }
    let (h, w) = (rows[0][0].height(), rows[0][0].width());
    let mut canvas = image::GrayImage::from_pixel((w * cols) as u32, (h * rows.len()) as u32, image::Luma([0]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            image::imageops::replace(&mut canvas, &img.to_gray8(), (c * w) as i64, (r * h) as i64);
        }
    }
    canvas.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Default artifact locations under a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn initial(&self, mode: SamplerMode) -> PathBuf {
        self.root.join(format!("initial_{}", mode.as_str()))
    }
    pub fn refiner(&self) -> PathBuf {
        self.root.join("refiner")
    }
    pub fn classifier(&self) -> PathBuf {
        self.root.join("classifier")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph_data::SynthSpec;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.image_size = 16;
        c.channels = 1;
        c.patch_size = 8;
        c.stride = 4;
        c.schedule = crate::diffusion::ScheduleConfig { steps: 4, beta_start: 1e-3, beta_end: 0.3 };
        c.denoiser.patch_size = 8;
        c.denoiser.image_channels = 1;
        c.denoiser.base_channels = 4;
        c.denoiser.channel_mults = vec![1, 2];
        c.denoiser.time_embed_dim = 4;
        c.denoiser.norm_groups = 2;
        c.denoiser.epochs = 0;
        c.refiner.image_size = 16;
        c.refiner.image_channels = 1;
        c.classifier.image_size = 16;
        c.classifier.image_channels = 1;
        c.data.source = DataSource::Synthetic(SynthSpec { categories: 3, variants: 2, styles: 1, seed: 1, image_size: 16, channels: 1 });
        c.data.test_fraction = 0.34;
        c
    }

    fn untrained(cfg: &RunConfig, mode: SamplerMode) -> ParameterArchive {
        let prep = prepare(cfg).unwrap();
        let opts = TrainOptions { seed: 0, checkpoint_dir: None, resume: None, config_digest: String::new() };
        train_initial_model(cfg, &prep.train, mode, opts).unwrap()
    }

    #[test]
    fn shared_memo_keeps_models_apart() {
        let cfg = tiny();
        let prep = prepare(&cfg).unwrap();
        let cond = eval_items(&prep.corpus)[0].image.clone();
        let memo = Pipeline::new_memo();
        let (whole_arch, lss_arch) = (untrained(&cfg, SamplerMode::Whole), untrained(&cfg, SamplerMode::Lss));
        let whole = Pipeline::new(&cfg, SamplerMode::Whole, &whole_arch, None).unwrap().with_memo(memo.clone());
        let lss = Pipeline::new(&cfg, SamplerMode::Lss, &lss_arch, None).unwrap().with_memo(memo.clone());
        let a = whole.initial(&cond, 3).unwrap();
        let b = lss.initial(&cond, 3).unwrap();
        let fresh = Pipeline::new(&cfg, SamplerMode::Lss, &lss_arch, None).unwrap().initial(&cond, 3).unwrap();
        assert_ne!(a.pixels(), b.pixels());
        assert_eq!(b.pixels(), fresh.pixels());
        assert_eq!(memo.lock().unwrap().len(), 2);
        assert_eq!(lss.initial(&cond, 3).unwrap().pixels(), b.pixels());
    }

    #[test]
    fn whole_mode_rejects_a_patch_model() {
        let cfg = tiny();
        let arch = untrained(&cfg, SamplerMode::Lss);
        assert!(matches!(Pipeline::new(&cfg, SamplerMode::Whole, &arch, None), Err(Error::Config(_))));
    }

    #[test]
    fn multi_round_subset_takes_leading_variants() {
        let cfg = tiny();
        let items = eval_items(&prepare(&cfg).unwrap().corpus);
        let sub = multi_round_items(&items, Some(1));
        assert_eq!(sub.len(), 3);
        assert!(sub.iter().all(|it| it.name.contains("v00")));
        assert_eq!(multi_round_items(&items, None).len(), items.len());
    }

    fn report(whole10: f64, lss10: f64, lss1: f64, ref1: f64, cum: Vec<f64>) -> AblationReport {
        let arm = |name: &str, mode, refine, t1, t10| ArmSummary {
            name: name.into(),
            mode,
            refine,
            training_seed: 0,
            step_budget: 10,
            steps_trained: 10,
            refiner_steps: 0,
            pipeline_digest: String::new(),
            ks: vec![1, 10],
            top_k: vec![t1, t10],
        };
        AblationReport {
            config_digest: String::new(),
            corpus_digest: String::new(),
            categories: 60,
            train_categories: 54,
            test_categories: 6,
            image_size: 128,
            patch_size: 64,
            stride: 16,
            eval_seed: 1,
            classifier_digest: String::new(),
            classifier_accuracy: 1.0,
            arms: vec![
                arm("whole", SamplerMode::Whole, false, 0.0, whole10),
                arm("lss", SamplerMode::Lss, false, lss1, lss10),
                arm("lss_refine", SamplerMode::Lss, true, ref1, lss10),
            ],
            multi_round_items: 18,
            multi_round_seeds: vec![1, 2, 3, 4, 5],
            multi_round_cumulative: cum,
        }
    }

    #[test]
    fn ablation_checks_follow_the_thresholds() {
        let good = report(0.2, 0.3, 0.10, 0.08, vec![0.1, 0.2, 0.2, 0.3, 0.3]);
        assert!(good.checks().unwrap().iter().all(|c| c.passed));
        let bad = report(0.25, 0.3, 0.10, 0.07, vec![0.1, 0.1, 0.1, 0.1]);
        let passed: Vec<bool> = bad.checks().unwrap().iter().map(|c| c.passed).collect();
        assert_eq!(passed, vec![true, false, false, false]);
        let mut uneven = good.clone();
        uneven.arms[0].steps_trained = 9;
        assert!(!uneven.checks().unwrap()[0].passed);
    }

    #[test]
    fn ablation_report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(0.2, 0.3, 0.1, 0.1, vec![0.1; 5]);
        r.write(dir.path()).unwrap();
        assert_eq!(AblationReport::load(&dir.path().join("ablation.toml")).unwrap(), r);
        assert!(fs::read_to_string(dir.path().join("ablation.csv")).unwrap().starts_with("arm,top_1,top_10\n"));
    }
}
