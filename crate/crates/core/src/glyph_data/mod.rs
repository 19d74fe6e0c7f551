//! Glyph corpora: synthesis, on-disk ingestion, category-disjoint splits and
//! the two pairing regimes used for training.
//!
//! On disk a corpus is `root/<category>/<role>/<name>.png` with roles
//! `condition`, `target` and `style_reference`, plus a `manifest.toml`
//! describing counts, per-category digests and the generator seed.

pub mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{from_u8, pad_and_resize, read_gray, to_u8, GlyphImage, Role};
use crate::lss::PatchLayout;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

use synth::{ancient_strokes, modern_strokes, rasterize, skeletons, style_pens, CANONICAL_PEN};

pub const MANIFEST_FILE: &str = "manifest.toml";
/// Name of the canonical modern style (the target-role image).
pub const CANONICAL_STYLE: &str = "canon";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic { seed: u64, generator_version: u32 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: GlyphImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Category {
    pub id: String,
    pub conditions: Vec<NamedImage>,
    pub target: Option<NamedImage>,
    pub styles: Vec<NamedImage>,
}

impl Category {
    fn new(id: &str) -> Self {
        Self { id: id.to_string(), conditions: Vec::new(), target: None, styles: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.conditions.len() + self.styles.len() + self.target.is_some() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Modern rendering in style `name`; the canonical style is the target.
    pub fn style(&self, name: &str) -> Option<&GlyphImage> {
        match &self.target {
            Some(t) if t.name == name => Some(&t.image),
            _ => self.styles.iter().find(|s| s.name == name).map(|s| &s.image),
        }
    }

    /// Every modern rendering (target first).
    pub fn modern(&self) -> impl Iterator<Item = &NamedImage> {
        self.target.iter().chain(&self.styles)
    }

    fn images(&self) -> impl Iterator<Item = &NamedImage> {
        self.conditions.iter().chain(self.target.iter()).chain(&self.styles)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        for n in self.images() {
            h.update([0u8]);
            h.update(n.image.role.as_str().as_bytes());
            h.update([0u8]);
            h.update(n.name.as_bytes());
            for v in n.image.pixels().data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlyphCorpus {
    /// Sorted by id.
    pub categories: Vec<Category>,
    pub provenance: Provenance,
    pub image_size: usize,
    pub channels: usize,
    /// Files that could not be read during ingestion.
    pub skipped: Vec<String>,
}

impl GlyphCorpus {
    pub fn category_ids(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.id.clone()).collect()
    }

    pub fn category(&self, id: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image_count(&self) -> usize {
        self.categories.iter().map(Category::len).sum()
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.categories {
            h.update(c.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Sub-corpus restricted to `ids` (kept in corpus order).
    pub fn subset(&self, ids: &BTreeSet<String>) -> GlyphCorpus {
        GlyphCorpus {
            categories: self.categories.iter().filter(|c| ids.contains(&c.id)).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            provenance: self.provenance.clone(),
            image_size: self.image_size,
            channels: self.channels,
            digest: self.digest(),
            image_count: self.image_count(),
            categories: self
                .categories
                .iter()
                .map(|c| CategoryEntry {
                    id: c.id.clone(),
                    condition: c.conditions.len(),
                    target: c.target.is_some() as usize,
                    style_reference: c.styles.len(),
                    digest: c.digest(),
                })
                .collect(),
            skipped: self.skipped.clone(),
        }
    }

    /// Write images as 8-bit grayscale PNGs plus the manifest.
    pub fn write(&self, root: &Path) -> Result<CorpusManifest> {
        for c in &self.categories {
            for n in c.images() {
                let dir = root.join(&c.id).join(n.image.role.as_str());
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                n.image.save_png(&dir.join(format!("{}.png", n.name)))?;
            }
        }
        let m = self.manifest();
        m.save(&root.join(MANIFEST_FILE))?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub id: String,
    pub condition: usize,
    pub target: usize,
    pub style_reference: usize,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub provenance: Provenance,
    pub image_size: usize,
    pub channels: usize,
    pub digest: String,
    pub image_count: usize,
    pub categories: Vec<CategoryEntry>,
    pub skipped: Vec<String>,
}

impl CorpusManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub categories: usize,
    pub variants: usize,
    pub styles: usize,
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { categories: 60, variants: 8, styles: 20, seed: 0, image_size: 128, channels: 3 }
    }
}

pub fn category_id(i: usize) -> String {
    format!("c{i:04}")
}

pub fn style_name(i: usize) -> String {
    format!("s{:02}", i + 1)
}

fn quantized(plane: Vec<f32>) -> Vec<f32> {
    plane.into_iter().map(|v| from_u8(to_u8(v))).collect()
}

/// Generate a synthetic corpus. Pixel values are snapped to the 8-bit grid
/// so writing to PNG and re-ingesting reproduces the corpus exactly.
pub fn synth_corpus(spec: &SynthSpec) -> Result<GlyphCorpus> {
    if spec.categories == 0 || spec.variants == 0 || spec.styles == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::InvalidArgument("synthetic corpus counts must be at least 1".into()));
    }
    let (size, ch) = (spec.image_size, spec.channels);
    let pens = style_pens(spec.styles, spec.seed);
    let sks = skeletons(spec.categories, spec.seed);
    let mut categories = Vec::with_capacity(spec.categories);
    for (i, sk) in sks.iter().enumerate() {
        let id = category_id(i);
        let mut cat = Category::new(&id);
        let make = |strokes: &[synth::PlacedStroke], rounding: f64, role: Role| {
            GlyphImage::from_gray(&quantized(rasterize(strokes, rounding, size)), size, size, ch, role, Some(id.clone()))
        };
        cat.target = Some(NamedImage {
            name: CANONICAL_STYLE.into(),
            image: make(&modern_strokes(sk, &CANONICAL_PEN), CANONICAL_PEN.rounding, Role::Target)?,
        });
        for (s, pen) in pens.iter().enumerate() {
            cat.styles.push(NamedImage {
                name: style_name(s),
                image: make(&modern_strokes(sk, pen), pen.rounding, Role::StyleReference)?,
            });
        }
        let mut r = rng::substream(spec.seed, "ancient", i as u64);
        for v in 0..spec.variants {
            let (strokes, _) = ancient_strokes(sk, &mut r);
            cat.conditions.push(NamedImage { name: format!("v{v:02}"), image: make(&strokes, 1.0, Role::Condition)? });
        }
        categories.push(cat);
    }
    Ok(GlyphCorpus {
        categories,
        provenance: Provenance::Synthetic { seed: spec.seed, generator_version: synth::GENERATOR_VERSION },
        image_size: size,
        channels: ch,
        skipped: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    pub image_size: usize,
    pub channels: usize,
    /// Set for dark-ink-on-light scans so ink maps to +1.
    pub invert: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { image_size: 128, channels: 3, invert: false }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::fs::DirEntry>> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(dir, e))?;
    v.sort_by_key(|e| e.file_name());
    Ok(v)
}

/// Load `root/<category>/<role>/<files>`. Unreadable files are skipped with
/// a warning and listed in [`GlyphCorpus::skipped`].
pub fn ingest(root: &Path, opts: &IngestOptions) -> Result<GlyphCorpus> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let provenance = match CorpusManifest::load(&root.join(MANIFEST_FILE)) {
        Ok(m) => m.provenance,
        Err(_) => Provenance::Real,
    };
    let (size, ch) = (opts.image_size, opts.channels);
    let mut categories = Vec::new();
    let mut skipped = Vec::new();
    for cat_entry in sorted_entries(root)? {
        if !cat_entry.path().is_dir() {
            continue;
        }
        let id = cat_entry.file_name().to_string_lossy().into_owned();
        let mut cat = Category::new(&id);
        for role_entry in sorted_entries(&cat_entry.path())? {
            if !role_entry.path().is_dir() {
                continue;
            }
            let role: Role = role_entry.file_name().to_string_lossy().parse()?;
            if role == Role::Generated {
                return Err(Error::Data(format!("{}: generated images cannot be ingested", role_entry.path().display())));
            }
            for file in sorted_entries(&role_entry.path())? {
                let path = file.path();
                if !path.is_file() {
                    continue;
                }
                let (raw, h, w) = match read_gray(&path) {
                    Ok(v) => v,
                    Err(e) => {
                        warn!("skipping {}: {e}", path.display());
                        skipped.push(path.display().to_string());
                        continue;
                    }
                };
                let plane: Vec<f32> =
                    raw.iter().map(|&v| if opts.invert { -from_u8(v) } else { from_u8(v) }).collect();
                let plane = pad_and_resize(&plane, h, w, size, -1.0);
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let image = GlyphImage::from_gray(&plane, size, size, ch, role, Some(id.clone()))?;
                let named = NamedImage { name, image };
                match role {
                    Role::Condition => cat.conditions.push(named),
                    Role::StyleReference => cat.styles.push(named),
                    Role::Target => {
                        if cat.target.is_some() {
                            return Err(Error::Data(format!("category {id} has more than one target rendering")));
                        }
                        cat.target = Some(named);
                    }
                    Role::Generated => unreachable!(),
                }
            }
        }
        if cat.is_empty() {
            return Err(Error::Data(format!("category {id} contains no readable images")));
        }
        categories.push(cat);
    }
    if categories.is_empty() {
        return Err(Error::Data(format!("no categories under {}", root.display())));
    }
    Ok(GlyphCorpus { categories, provenance, image_size: size, channels: ch, skipped })
}

/// Outcome of a category-level split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn train_set(&self) -> BTreeSet<String> {
        self.train.iter().cloned().collect()
    }

    pub fn test_set(&self) -> BTreeSet<String> {
        self.test.iter().cloned().collect()
    }
}

/// Number of held-out categories for `n` categories.
pub fn test_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Category-disjoint split: ids are sorted, shuffled with `seed`, and the
/// first `floor(fraction * n)` become the test side.
pub fn split_categories(corpus: &GlyphCorpus, test_fraction: f64, seed: u64) -> Result<(GlyphCorpus, GlyphCorpus, SplitSpec)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut ids = corpus.category_ids();
    ids.sort();
    let n_test = test_count(ids.len(), test_fraction);
    if n_test == 0 || n_test == ids.len() {
        return Err(Error::Data(format!(
            "{} categories cannot be split with test fraction {test_fraction}",
            ids.len()
        )));
    }
    ids.shuffle(&mut rng::substream(seed, "split", 0));
    let mut test: Vec<String> = ids[..n_test].to_vec();
    let mut train: Vec<String> = ids[n_test..].to_vec();
    test.sort();
    train.sort();
    let spec = SplitSpec { test_fraction, seed, train, test };
    Ok((corpus.subset(&spec.train_set()), corpus.subset(&spec.test_set()), spec))
}

/// Condition/target images of one category.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub condition: GlyphImage,
    pub target: GlyphImage,
    pub category: String,
}

impl TrainingPair {
    fn new(condition: GlyphImage, target: GlyphImage, category: &str) -> Result<Self> {
        if condition.pixels().shape() != target.pixels().shape() {
            return Err(Error::Shape(format!("pair for {category} has mismatched image shapes")));
        }
        Ok(Self { condition, target, category: category.to_string() })
    }
}

/// One pair per ancient-role image, all sharing the category's canonical target.
pub fn make_many_to_one_pairs(corpus: &GlyphCorpus) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for c in &corpus.categories {
        let target = c.target.as_ref().ok_or_else(|| Error::Data(format!("category {} has no canonical target", c.id)))?;
        for cond in &c.conditions {
            out.push(TrainingPair::new(cond.image.clone(), target.image.clone(), &c.id)?);
        }
    }
    Ok(out)
}

/// For each category and each source style, pair the source-style rendering
/// with the target-style rendering. Ancient-role images are never used.
pub fn make_one_to_one_font_pairs(corpus: &GlyphCorpus, source_styles: &[String], target_style: &str) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::with_capacity(corpus.categories.len() * source_styles.len());
    for c in &corpus.categories {
        let target = c
            .style(target_style)
            .ok_or_else(|| Error::Data(format!("category {} lacks style {target_style}", c.id)))?;
        for s in source_styles {
            let src = c.style(s).ok_or_else(|| Error::Data(format!("category {} lacks style {s}", c.id)))?;
            debug_assert!(src.role != Role::Condition);
            out.push(TrainingPair::new(src.clone(), target.clone(), &c.id)?);
        }
    }
    Ok(out)
}

/// Names of every non-canonical style present in all categories, sorted.
pub fn common_styles(corpus: &GlyphCorpus) -> Vec<String> {
    let mut sets = corpus.categories.iter().map(|c| c.styles.iter().map(|s| s.name.clone()).collect::<BTreeSet<_>>());
    let first = sets.next().unwrap_or_default();
    sets.fold(first, |acc, s| acc.intersection(&s).cloned().collect()).into_iter().collect()
}

pub fn shuffle_pairs(pairs: &mut [TrainingPair], seed: u64) {
    pairs.shuffle(&mut rng::substream(seed, "pairs", 0));
}

/// Aligned crop of a training pair at layout location `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub location: usize,
    pub target: Tensor<f32>,
    pub condition: Tensor<f32>,
}

/// All aligned crops of `pair`, in an order shuffled by `rng`.
pub fn patchify(pair: &TrainingPair, layout: &PatchLayout, rng: &mut Rng) -> Result<Vec<PatchSample>> {
    if (pair.target.height(), pair.target.width()) != (layout.height, layout.width) {
        return Err(Error::Shape(format!(
            "pair is {}x{}, layout expects {}x{}",
            pair.target.height(),
            pair.target.width(),
            layout.height,
            layout.width
        )));
    }
    let mut order: Vec<usize> = (0..layout.count()).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|d| {
            let (t, l) = layout.origin(d);
            let p = layout.patch;
            Ok(PatchSample {
                location: d,
                target: pair.target.pixels().crop(t, l, p, p)?,
                condition: pair.condition.pixels().crop(t, l, p, p)?,
            })
        })
        .collect()
}
