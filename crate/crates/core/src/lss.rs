//! Localized structural sampling: reverse diffusion on overlapping patches.
//!
//! At every timestep the noisy image and the condition are cut into the
//! layout's sliding-window patches, the model predicts noise for all of them
//! in one batch, and the predictions are summed back in a fixed row-major
//! order and divided by per-pixel coverage. The reverse update then runs once
//! on the whole image with a single shared noise draw, so overlapping regions
//! see identical stochasticity.

use crate::denoiser::NoiseModel;
use crate::diffusion::{NoiseSchedule, ReverseCoefs};
use crate::error::{Error, Result};
use crate::image::{GlyphImage, Role};
use crate::rng::NoiseSource;
use crate::tensor::Tensor;

/// Sliding-window patch grid over an `height x width` image.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLayout {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub stride: usize,
    origins: Vec<(usize, usize)>,
    coverage: Vec<u32>,
}

impl PatchLayout {
    pub fn count(&self) -> usize {
        self.origins.len()
    }

    /// Top-left corner `(row, col)` of patch `d`.
    pub fn origin(&self, d: usize) -> (usize, usize) {
        self.origins[d]
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    /// Number of patches covering pixel `(y, x)`.
    pub fn coverage(&self, y: usize, x: usize) -> u32 {
        self.coverage[y * self.width + x]
    }

    /// Whether patch `d` covers pixel `(y, x)`.
    pub fn covers(&self, d: usize, y: usize, x: usize) -> bool {
        let (top, left) = self.origins[d];
        (top..top + self.patch).contains(&y) && (left..left + self.patch).contains(&x)
    }

    /// Binary mask of patch `d` over the full grid, row-major.
    pub fn mask(&self, d: usize) -> Vec<bool> {
        (0..self.height * self.width).map(|i| self.covers(d, i / self.width, i % self.width)).collect()
    }

    /// Whether column `x` lies on a patch boundary (first or last column of
    /// some patch, excluding the image border).
    pub fn is_boundary_column(&self, x: usize) -> bool {
        x > 0
            && x + 1 < self.width
            && self.origins.iter().any(|&(_, l)| x == l || x + 1 == l + self.patch)
    }
}

pub fn build_patch_layout(height: usize, width: usize, patch: usize, stride: usize) -> Result<PatchLayout> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be positive".into()));
    }
    if stride > patch {
        return Err(Error::InvalidArgument(format!("stride {stride} larger than patch {patch} leaves gaps")));
    }
    if patch > height || patch > width {
        return Err(Error::InvalidArgument(format!("patch {patch} exceeds image {height}x{width}")));
    }
    if (height - patch) % stride != 0 || (width - patch) % stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "stride {stride} does not tile {height}x{width} with patch {patch}"
        )));
    }
    let mut origins = Vec::new();
    for top in (0..=height - patch).step_by(stride) {
        for left in (0..=width - patch).step_by(stride) {
            origins.push((top, left));
        }
    }
    let mut coverage = vec![0u32; height * width];
    for &(top, left) in &origins {
        for y in top..top + patch {
            for c in &mut coverage[y * width + left..y * width + left + patch] {
                *c += 1;
            }
        }
    }
    Ok(PatchLayout { height, width, patch, stride, origins, coverage })
}

/// Sum patch predictions (`[D, C, p, p]`) onto the grid in `order` and divide
/// by coverage, giving a `[C, H, W]` noise estimate.
pub fn aggregate(preds: &Tensor<f32>, layout: &PatchLayout, order: &[usize]) -> Result<Tensor<f32>> {
    let p = layout.patch;
    if preds.ndim() != 4 || preds.dim(0) != layout.count() || preds.dim(2) != p || preds.dim(3) != p {
        return Err(Error::Shape(format!("patch predictions {:?} do not match layout", preds.shape())));
    }
    let (c, h, w) = (preds.dim(1), layout.height, layout.width);
    let mut acc = vec![0.0f32; c * h * w];
    for &d in order {
        let (top, left) = layout.origin(d);
        let src = preds.outer(d);
        for ch in 0..c {
            for y in 0..p {
                let row = &src[(ch * p + y) * p..(ch * p + y + 1) * p];
                let dst = &mut acc[(ch * h + top + y) * w + left..][..p];
                for (a, v) in dst.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
    }
    for ch in 0..c {
        for (a, m) in acc[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&layout.coverage) {
            *a /= *m as f32;
        }
    }
    Tensor::new(&[c, h, w], acc)
}

/// Stack the layout's crops of a `[C, H, W]` image into `[D, C, p, p]`.
pub fn extract_patches(img: &Tensor<f32>, layout: &PatchLayout) -> Result<Tensor<f32>> {
    let crops: Vec<Tensor<f32>> = layout
        .origins
        .iter()
        .map(|&(t, l)| img.crop(t, l, layout.patch, layout.patch))
        .collect::<Result<_>>()?;
    Tensor::stack(&crops.iter().collect::<Vec<_>>())
}

fn check_inputs<M: NoiseModel + ?Sized>(cond: &GlyphImage, model: &M, layout: &PatchLayout) -> Result<()> {
    if (cond.height(), cond.width()) != (layout.height, layout.width) {
        return Err(Error::Shape(format!(
            "condition is {}x{}, layout expects {}x{}",
            cond.height(),
            cond.width(),
            layout.height,
            layout.width
        )));
    }
    if let Some(p) = model.patch_size() {
        if p != layout.patch {
            return Err(Error::InvalidArgument(format!("model patch {p} differs from layout patch {}", layout.patch)));
        }
    }
    Ok(())
}

/// Run the patched reverse process from pure noise.
pub fn lss_sample<M: NoiseModel + ?Sized>(
    cond: &GlyphImage,
    model: &M,
    sched: &NoiseSchedule,
    layout: &PatchLayout,
    noise: &mut dyn NoiseSource,
) -> Result<GlyphImage> {
    let order: Vec<usize> = (0..layout.count()).collect();
    lss_sample_observed(cond, model, sched, layout, noise, &order, &mut |_, _| {})
}

/// [`lss_sample`] with an explicit aggregation order and a hook receiving
/// `(t, aggregated noise estimate)` at every timestep.
pub fn lss_sample_observed<M: NoiseModel + ?Sized>(
    cond: &GlyphImage,
    model: &M,
    sched: &NoiseSchedule,
    layout: &PatchLayout,
    noise: &mut dyn NoiseSource,
    order: &[usize],
    observe: &mut dyn FnMut(usize, &Tensor<f32>),
) -> Result<GlyphImage> {
    check_inputs(cond, model, layout)?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..layout.count()).collect::<Vec<_>>() {
        return Err(Error::InvalidArgument("aggregation order must be a permutation of the patches".into()));
    }
    let shape = cond.pixels().shape().to_vec();
    let cond_patches = extract_patches(cond.pixels(), layout)?;
    let mut x = noise.draw(&shape);
    for t in (1..=sched.steps()).rev() {
        let xt_patches = extract_patches(&x, layout)?;
        let preds = model.predict(&xt_patches, &cond_patches, &vec![t; layout.count()])?;
        let omega = aggregate(&preds, layout, order)?;
        observe(t, &omega);
        x = step(&x, &omega, t, sched, noise)?;
    }
    GlyphImage::from_clipped(x, Role::Generated, cond.category.clone())
}

/// Plain reverse process on the whole image (no patching).
pub fn sample_whole<M: NoiseModel + ?Sized>(
    cond: &GlyphImage,
    model: &M,
    sched: &NoiseSchedule,
    noise: &mut dyn NoiseSource,
) -> Result<GlyphImage> {
    if let Some(p) = model.patch_size() {
        if p != cond.height() || p != cond.width() {
            return Err(Error::InvalidArgument(format!(
                "model patch {p} does not match image {}x{}",
                cond.height(),
                cond.width()
            )));
        }
    }
    let shape = cond.pixels().shape().to_vec();
    let batched = [1, shape[0], shape[1], shape[2]];
    let c = cond.pixels().clone().reshape(&batched)?;
    let mut x = noise.draw(&shape);
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&x.clone().reshape(&batched)?, &c, &[t])?.reshape(&shape)?;
        x = step(&x, &eps, t, sched, noise)?;
    }
    GlyphImage::from_clipped(x, Role::Generated, cond.category.clone())
}

fn step(x: &Tensor<f32>, eps: &Tensor<f32>, t: usize, sched: &NoiseSchedule, noise: &mut dyn NoiseSource) -> Result<Tensor<f32>> {
    sched.check_t(t)?;
    let k = ReverseCoefs::at(sched, t);
    let (a, b) = (k.inv_sqrt_alpha as f32, k.eps_coef as f32);
    let mut out: Vec<f32> = x.data().iter().zip(eps.data()).map(|(xv, ev)| a * (xv - b * ev)).collect();
    if t > 1 {
        let z = noise.draw(x.shape());
        let s = k.noise_coef as f32;
        out.iter_mut().zip(z.data()).for_each(|(o, zv)| *o += s * zv);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sampler state at t = {t}")));
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::reverse_step;
    use crate::rng::GaussianNoise;
    use proptest::prelude::*;

    /// Returns a fixed value per patch, chosen by the patch's column origin.
    struct ColumnConst;

    impl NoiseModel for ColumnConst {
        fn patch_size(&self) -> Option<usize> {
            None
        }
        fn predict(&self, xt: &Tensor<f32>, _c: &Tensor<f32>, _ts: &[usize]) -> Result<Tensor<f32>> {
            let per = xt.numel() / xt.dim(0);
            let data = (0..xt.numel()).map(|i| (i / per) as f32 * 2.0 + 1.0).collect();
            Tensor::new(xt.shape(), data)
        }
    }

    /// Noise estimate equal to the noisy input, scaled.
    struct Scaled(f32);

    impl NoiseModel for Scaled {
        fn patch_size(&self) -> Option<usize> {
            None
        }
        fn predict(&self, xt: &Tensor<f32>, c: &Tensor<f32>, _ts: &[usize]) -> Result<Tensor<f32>> {
            xt.zip_map(c, |a, b| self.0 * a + 0.1 * b)
        }
    }

    fn blank(h: usize, w: usize) -> GlyphImage {
        GlyphImage::new(Tensor::full(&[1, h, w], -1.0), Role::Condition, None).unwrap()
    }

    #[test]
    fn layout_counts() {
        let l = build_patch_layout(64, 64, 64, 16).unwrap();
        assert_eq!(l.count(), 1);
        assert!((0..64).all(|y| (0..64).all(|x| l.coverage(y, x) == 1)));
        let l = build_patch_layout(128, 128, 64, 16).unwrap();
        let oracle = (0..=64).step_by(16).count().pow(2);
        assert_eq!(l.count(), oracle);
        let starts_covering = |i: usize| (0..=64usize).step_by(16).filter(|s| (*s..*s + 64).contains(&i)).count() as u32;
        assert_eq!(l.coverage(64, 64), starts_covering(64) * starts_covering(64));
        assert_eq!(l.coverage(64, 64), 16);
    }

    #[test]
    fn layout_rejects_bad_geometry() {
        assert!(build_patch_layout(128, 128, 64, 24).is_err());
        assert!(build_patch_layout(32, 64, 64, 16).is_err());
        assert!(build_patch_layout(64, 64, 64, 0).is_err());
        assert!(build_patch_layout(10, 10, 2, 4).is_err());
    }

    #[test]
    fn constant_model_gives_constant_estimate() {
        struct Const;
        impl NoiseModel for Const {
            fn patch_size(&self) -> Option<usize> {
                Some(8)
            }
            fn predict(&self, xt: &Tensor<f32>, _c: &Tensor<f32>, _ts: &[usize]) -> Result<Tensor<f32>> {
                Ok(Tensor::full(xt.shape(), 0.37))
            }
        }
        let layout = build_patch_layout(16, 16, 8, 2).unwrap();
        let sched = NoiseSchedule::linear(5, 1e-3, 0.2).unwrap();
        let mut seen = 0;
        let order: Vec<usize> = (0..layout.count()).collect();
        lss_sample_observed(&blank(16, 16), &Const, &sched, &layout, &mut GaussianNoise::new(1), &order, &mut |_, om| {
            seen += 1;
            assert!(om.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        })
        .unwrap();
        assert_eq!(seen, 5);
    }

    #[test]
    fn two_patch_overlap_is_the_mean() {
        // 1 x 6 strip, patches of width 4 at columns 0 and 2 (1-D layout).
        let layout = build_patch_layout(4, 6, 4, 2).unwrap();
        assert_eq!(layout.count(), 2);
        let preds = ColumnConst.predict(&Tensor::zeros(&[2, 1, 4, 4]), &Tensor::zeros(&[2, 1, 4, 4]), &[1, 1]).unwrap();
        let om = aggregate(&preds, &layout, &[0, 1]).unwrap();
        let row: Vec<f32> = om.data()[..6].to_vec();
        assert_eq!(row, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn aggregation_matches_per_pixel_oracle() {
        let layout = build_patch_layout(12, 10, 6, 2).unwrap();
        let mut r = crate::rng::seeded(4);
        let preds = Tensor::randn(&[layout.count(), 2, 6, 6], &mut r);
        let om = aggregate(&preds, &layout, &(0..layout.count()).collect::<Vec<_>>()).unwrap();
        for ch in 0..2 {
            for y in 0..12 {
                for x in 0..10 {
                    let mut s = 0.0f64;
                    let mut m = 0;
                    for d in 0..layout.count() {
                        if layout.mask(d)[y * 10 + x] {
                            let (t, l) = layout.origin(d);
                            s += preds.data()[((d * 2 + ch) * 6 + y - t) * 6 + x - l] as f64;
                            m += 1;
                        }
                    }
                    let got = om.data()[(ch * 12 + y) * 10 + x] as f64;
                    assert!((got - s / m as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_patch_matches_whole_image_sampler() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let cond = blank(8, 8);
        let layout = build_patch_layout(8, 8, 8, 4).unwrap();
        let a = lss_sample(&cond, &Scaled(0.3), &sched, &layout, &mut GaussianNoise::new(11)).unwrap();
        let b = sample_whole(&cond, &Scaled(0.3), &sched, &mut GaussianNoise::new(11)).unwrap();
        assert!(a.pixels().max_abs_diff(b.pixels()) < 1e-6);
    }

    #[test]
    fn whole_sampler_uses_reverse_step() {
        // One-step schedule: output is the deterministic reverse update, clipped.
        let sched = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
        let cond = blank(4, 4);
        let mut n1 = GaussianNoise::new(5);
        let out = sample_whole(&cond, &Scaled(0.5), &sched, &mut n1).unwrap();
        let mut n2 = GaussianNoise::new(5);
        let x = n2.draw(&[1, 4, 4]);
        let eps = Scaled(0.5).predict(&x, cond.pixels(), &[1]).unwrap();
        let expect = reverse_step(&x, &eps, 1, &sched, &Tensor::zeros(&[1, 4, 4])).unwrap();
        let expect = expect.map(|v| v.clamp(-1.0, 1.0));
        assert!(out.pixels().max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn one_noise_draw_per_timestep() {
        let sched = NoiseSchedule::linear(7, 1e-3, 0.2).unwrap();
        let layout = build_patch_layout(16, 16, 8, 4).unwrap();
        let mut noise = GaussianNoise::new(2);
        lss_sample(&blank(16, 16), &Scaled(0.2), &sched, &layout, &mut noise).unwrap();
        // X_T plus one injection for each of t = T..2.
        assert_eq!(noise.draws(), 7);
    }

    #[test]
    fn deterministic_given_seed() {
        let sched = NoiseSchedule::linear(6, 1e-3, 0.2).unwrap();
        let layout = build_patch_layout(16, 16, 8, 4).unwrap();
        let run = |s| lss_sample(&blank(16, 16), &Scaled(0.2), &sched, &layout, &mut GaussianNoise::new(s)).unwrap();
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        struct P8;
        impl NoiseModel for P8 {
            fn patch_size(&self) -> Option<usize> {
                Some(8)
            }
            fn predict(&self, xt: &Tensor<f32>, _c: &Tensor<f32>, _ts: &[usize]) -> Result<Tensor<f32>> {
                Ok(xt.clone())
            }
        }
        let sched = NoiseSchedule::linear(2, 1e-3, 0.2).unwrap();
        let layout = build_patch_layout(16, 16, 4, 4).unwrap();
        assert!(lss_sample(&blank(16, 16), &P8, &sched, &layout, &mut GaussianNoise::new(0)).is_err());
        let layout = build_patch_layout(16, 16, 8, 4).unwrap();
        assert!(lss_sample(&blank(12, 16), &P8, &sched, &layout, &mut GaussianNoise::new(0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn layout_invariants(n_h in 0usize..5, n_w in 0usize..5, p in 1usize..6, r in 1usize..4) {
            prop_assume!(r <= p);
            let (h, w) = (p + n_h * r, p + n_w * r);
            let l = build_patch_layout(h, w, p, r).unwrap();
            prop_assert_eq!(l.count(), (n_h + 1) * (n_w + 1));
            for y in 0..h {
                for x in 0..w {
                    let m = (0..l.count()).filter(|&d| l.covers(d, y, x)).count() as u32;
                    prop_assert!(m >= 1);
                    prop_assert_eq!(m, l.coverage(y, x));
                }
            }
            for d in 0..l.count() {
                prop_assert_eq!(l.mask(d).iter().filter(|b| **b).count(), p * p);
            }
        }

        #[test]
        fn aggregation_order_independent(seed in 0u64..1000) {
            let layout = build_patch_layout(14, 14, 6, 2).unwrap();
            let mut r = crate::rng::seeded(seed);
            let preds = Tensor::randn(&[layout.count(), 1, 6, 6], &mut r);
            let fwd: Vec<usize> = (0..layout.count()).collect();
            let mut shuffled = fwd.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut r);
            let a = aggregate(&preds, &layout, &fwd).unwrap();
            let b = aggregate(&preds, &layout, &shuffled).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }
}
