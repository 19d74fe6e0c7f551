use decipher_core::archive::ParameterArchive;
use decipher_core::config::{DataSource, RunConfig};
use decipher_core::denoiser::{train_initial, Denoiser, DenoiserConfig, ImagePair, NoiseModel, TrainOptions};
use decipher_core::diffusion::{NoiseSchedule, ScheduleConfig};
use decipher_core::glyph_data::{make_many_to_one_pairs, synth_corpus, SynthSpec};
use decipher_core::lss::build_patch_layout;
use decipher_core::pipeline::{run_ablation, AblationReport};
use decipher_core::refiner::{load_refiner, Refiner};
use decipher_core::rng;
use decipher_core::tensor::Tensor;

fn glyph_pairs() -> Vec<ImagePair> {
    let corpus = synth_corpus(&SynthSpec { categories: 6, variants: 3, styles: 1, seed: 2, image_size: 16, channels: 1 }).unwrap();
    make_many_to_one_pairs(&corpus)
        .unwrap()
        .into_iter()
        .map(|p| ImagePair { target: p.target.pixels().clone(), cond: p.condition.pixels().clone() })
        .collect()
}

fn small_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        patch_size: 8,
        image_channels: 1,
        base_channels: 4,
        channel_mults: vec![1, 2],
        time_embed_dim: 4,
        norm_groups: 2,
        lr: 2e-3,
        weight_decay: 0.0,
        batch_size: 8,
        epochs: 1000,
        max_steps: Some(60),
        ..Default::default()
    }
}

#[test]
fn trained_denoiser_depends_on_its_condition() {
    let pairs = glyph_pairs();
    let cfg = small_denoiser();
    let layout = build_patch_layout(16, 16, 8, 4).unwrap();
    let sched = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
    let arch = train_initial(&pairs, &cfg, &layout, &sched, TrainOptions::new(1)).unwrap();
    let model = Denoiser::from_archive(&arch).unwrap();
    let mut r = rng::seeded(3);
    let xt = Tensor::<f32>::randn(&[4, 1, 8, 8], &mut r);
    let cond = Tensor::new(&[4, 1, 8, 8], pairs[..4].iter().flat_map(|p| p.cond.crop(4, 4, 8, 8).unwrap().into_data()).collect()).unwrap();
    let with = model.predict(&xt, &cond, &[10, 20, 30, 40]).unwrap();
    let without = model.predict(&xt, &Tensor::zeros(&[4, 1, 8, 8]), &[10, 20, 30, 40]).unwrap();
    let changed = with.data().iter().zip(without.data()).filter(|(a, b)| (*a - *b).abs() > 1e-4).count();
    assert!(changed * 100 >= with.numel(), "only {changed} of {} outputs changed", with.numel());
}

#[test]
fn resuming_a_finished_run_returns_the_same_archive() {
    let pairs = glyph_pairs();
    let cfg = DenoiserConfig { max_steps: Some(6), ..small_denoiser() };
    let layout = build_patch_layout(16, 16, 8, 4).unwrap();
    let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
    let first = train_initial(&pairs, &cfg, &layout, &sched, TrainOptions::new(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    first.save(dir.path()).unwrap();
    let loaded = ParameterArchive::load(dir.path()).unwrap();
    let opts = TrainOptions { resume: Some(loaded), ..TrainOptions::new(5) };
    let again = train_initial(&pairs, &cfg, &layout, &sched, opts).unwrap();
    assert_eq!(again.params, first.params);
    assert_eq!(again.manifest.training, first.manifest.training);
}

#[test]
fn trained_style_encoder_separates_fonts() {
    let corpus = synth_corpus(&SynthSpec { categories: 3, variants: 1, styles: 3, seed: 4, image_size: 16, channels: 1 }).unwrap();
    let cfg = decipher_core::refiner::RefinerConfig {
        image_size: 16,
        image_channels: 1,
        stem_channels: 2,
        unet_channels: vec![2, 2, 2],
        content_channels: vec![2, 2, 2],
        style_dim: 4,
        key_dim: 2,
        ffn_hidden: 4,
        time_embed_dim: 2,
        norm_groups: 1,
        schedule: ScheduleConfig { steps: 10, beta_start: 1e-3, beta_end: 0.2 },
        lr: 1e-3,
        batch_size: 2,
        max_steps: Some(4),
        ..Default::default()
    };
    let (pairs, refs) = decipher_core::pipeline::refiner_data(&corpus).unwrap();
    let arch = decipher_core::refiner::train_refiner(&pairs, &refs, &cfg, TrainOptions::new(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    arch.save(dir.path()).unwrap();
    let model: Refiner<f32> = load_refiner(dir.path()).unwrap();
    let c = &corpus.categories[0];
    let embed = |img: &decipher_core::image::GlyphImage| model.encode_style(&img.pixels().clone().reshape(&[1, 1, 16, 16]).unwrap()).unwrap();
    let a = embed(&c.styles[0].image);
    let b = embed(&c.styles[1].image);
    assert_eq!(a.shape(), &[1, 4]);
    assert_eq!(a, embed(&c.styles[0].image));
    assert!(a.max_abs_diff(&b) > 0.0);
}

fn tiny_run(out: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.image_size = 16;
    c.channels = 1;
    c.patch_size = 8;
    c.stride = 4;
    c.schedule = ScheduleConfig { steps: 4, beta_start: 1e-3, beta_end: 0.3 };
    c.denoiser = DenoiserConfig { max_steps: Some(3), checkpoint_every: 2, ..small_denoiser() };
    c.refiner.image_size = 16;
    c.refiner.image_channels = 1;
    c.refiner.stem_channels = 2;
    c.refiner.unet_channels = vec![2, 2, 2];
    c.refiner.content_channels = vec![2, 2, 2];
    c.refiner.style_dim = 4;
    c.refiner.key_dim = 2;
    c.refiner.ffn_hidden = 4;
    c.refiner.time_embed_dim = 2;
    c.refiner.norm_groups = 1;
    c.refiner.schedule = ScheduleConfig { steps: 4, beta_start: 1e-3, beta_end: 0.3 };
    c.refiner.batch_size = 2;
    c.refiner.max_steps = Some(2);
    c.classifier.image_size = 16;
    c.classifier.image_channels = 1;
    c.classifier.input_size = 8;
    c.classifier.widths = vec![4, 4, 4];
    c.classifier.epochs = 2;
    c.classifier.accuracy_bar = 0.0;
    c.data.source = DataSource::Synthetic(SynthSpec { categories: 10, variants: 2, styles: 2, seed: 1, image_size: 16, channels: 1 });
    c.data.test_fraction = 0.2;
    c.eval.ks = vec![1, 2, 10];
    c.eval.multi_round_variants = Some(1);
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn tiny_ablation_runs_end_to_end_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path());
    let report = run_ablation(&cfg, dir.path()).unwrap();
    assert_eq!((report.categories, report.train_categories, report.test_categories), (10, 8, 2));
    let names: Vec<&str> = report.arms.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["whole", "lss", "lss_refine"]);
    assert!(report.arms.iter().all(|a| a.steps_trained == 3 && a.step_budget == 3));
    assert_eq!(report.multi_round_cumulative.len(), 5);
    assert!(report.multi_round_cumulative.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(report.multi_round_items, 2);
    assert_ne!(report.arms[0].pipeline_digest, report.arms[1].pipeline_digest);
    let checks = report.checks().unwrap();
    assert_eq!(checks.len(), 4);
    assert!(checks[0].passed);
    assert!(checks[3].passed);

    let loaded = AblationReport::load(&dir.path().join("ablation.toml")).unwrap();
    assert_eq!(loaded, report);
    let again = run_ablation(&cfg, dir.path()).unwrap();
    assert_eq!(again, report);

    let mut other = cfg.clone();
    other.seed = 99;
    assert!(run_ablation(&other, dir.path()).is_err());
}
