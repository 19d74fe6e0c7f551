use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use decipher_core::archive::ParameterArchive;
use decipher_core::config::RunConfig;
use decipher_core::denoiser::{Denoiser, GraphDenoiser};
use decipher_core::glyph_data::{CorpusManifest, SynthSpec, MANIFEST_FILE};
use decipher_core::pipeline::{load_reference, Pipeline, SamplerMode};
use decipher_core::config::DataSource;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_decipher"));
    c.env_remove("DECIPHER_CONFIG");
    c
}

fn run(args: &[&str], config: Option<&Path>) -> Output {
    let mut c = bin();
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.args(args).output().expect("spawn decipher")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

/// A configuration small enough to train in seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut c = RunConfig::default();
    c.image_size = 16;
    c.channels = 1;
    c.patch_size = 8;
    c.stride = 4;
    c.schedule.steps = 6;
    c.schedule.beta_start = 1e-3;
    c.schedule.beta_end = 0.3;
    c.denoiser.patch_size = 8;
    c.denoiser.image_channels = 1;
    c.denoiser.base_channels = 4;
    c.denoiser.channel_mults = vec![1, 2];
    c.denoiser.time_embed_dim = 4;
    c.denoiser.norm_groups = 2;
    c.denoiser.batch_size = 4;
    c.denoiser.epochs = 1;
    c.denoiser.checkpoint_every = 2;
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
    c.refiner.schedule.steps = 4;
    c.refiner.schedule.beta_end = 0.3;
    c.refiner.batch_size = 4;
    c.refiner.max_steps = Some(2);
    c.classifier.image_size = 16;
    c.classifier.image_channels = 1;
    c.classifier.input_size = 8;
    c.classifier.widths = vec![4, 4, 4];
    c.classifier.epochs = 1;
    c.classifier.accuracy_bar = 0.0;
    c.data.source = DataSource::Synthetic(SynthSpec { categories: 5, variants: 2, styles: 2, seed: 3, image_size: 16, channels: 1 });
    c.data.test_fraction = 0.2;
    c.eval.ks = vec![1, 2];
    c.eval.trials = 2;
    c.output_dir = dir.join("run");
    let p = dir.join("config.toml");
    c.save(&p).unwrap();
    p
}

fn count_files(dir: &Path, ext: &str) -> usize {
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            n += count_files(&p, ext);
        } else if p.extension().is_some_and(|x| x == ext) {
            n += 1;
        }
    }
    n
}

#[test]
fn synth_data_writes_expected_counts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = run(
            &["synth-data", "--out", d.to_str().unwrap(), "--categories", "4", "--variants", "3", "--styles", "2", "--image-size", "32"],
            None,
        );
        ok(&out);
    }
    assert_eq!(count_files(&a, "png"), 4 * (3 + 2 + 1));
    let ma = CorpusManifest::load(&a.join(MANIFEST_FILE)).unwrap();
    let mb = CorpusManifest::load(&b.join(MANIFEST_FILE)).unwrap();
    assert_eq!(ma.digest, mb.digest);

    let again = run(&["synth-data", "--out", a.to_str().unwrap(), "--categories", "2"], None);
    assert!(!again.status.success());
    let forced = run(&["synth-data", "--out", a.to_str().unwrap(), "--categories", "2", "--variants", "1", "--styles", "1", "--image-size", "16", "--force"], None);
    ok(&forced);
    assert_eq!(count_files(&a, "png"), 2 * 3);
}

#[test]
fn invalid_counts_exit_with_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["synth-data", "--out", tmp.path().join("x").to_str().unwrap(), "--categories", "0"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = run(&["no-such-command"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_round_trips_and_honours_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = bin().env("DECIPHER_CONFIG", &cfg).args(["print-config", "--seed", "42"]).output().unwrap();
    ok(&out);
    let printed = RunConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let mut want = RunConfig::load(&cfg).unwrap();
    want.seed = 42;
    assert_eq!(printed, want);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "patch_size = 48\n").unwrap();
    assert_eq!(run(&["print-config"], Some(&bad)).status.code(), Some(2));
}

#[test]
fn zero_epochs_yields_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out_dir = tmp.path().join("init");
    ok(&run(&["train-initial", "--epochs", "0", "--out", out_dir.to_str().unwrap()], Some(&cfg)));
    let a = ParameterArchive::load(&out_dir).unwrap();
    let c = RunConfig::load(&cfg).unwrap();
    let fresh = Denoiser::<f32>::new(c.denoiser.clone(), c.seed).unwrap();
    assert_eq!(&a.params, fresh.params());
    assert_eq!(a.manifest.training.step, 0);
    let mut digest_cfg = c.clone();
    digest_cfg.denoiser.epochs = 0;
    digest_cfg.denoiser.max_steps = None;
    assert_eq!(a.manifest.config_digest, digest_cfg.digest().unwrap());
}

#[test]
fn resumed_training_continues_the_interrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (part, full) = (tmp.path().join("part"), tmp.path().join("full"));
    ok(&run(&["train-initial", "--max-steps", "2", "--out", part.to_str().unwrap()], Some(&cfg)));
    ok(&run(&["train-initial", "--max-steps", "4", "--resume", "--out", part.to_str().unwrap()], Some(&cfg)));
    ok(&run(&["train-initial", "--max-steps", "4", "--out", full.to_str().unwrap()], Some(&cfg)));
    let (a, b) = (ParameterArchive::load(&part).unwrap(), ParameterArchive::load(&full).unwrap());
    assert_eq!(a.manifest.training.step, 4);
    assert_eq!(a.manifest.training.loss_history, b.manifest.training.loss_history);
    assert_eq!(a.params, b.params);
    let missing = run(&["train-initial", "--resume", "--out", tmp.path().join("none").to_str().unwrap()], Some(&cfg));
    assert_eq!(missing.status.code(), Some(3));
}

fn train_all(cfg: &Path) {
    ok(&run(&["train-initial", "--max-steps", "2"], Some(cfg)));
    ok(&run(&["train-refiner"], Some(cfg)));
    ok(&run(&["train-ocr"], Some(cfg)));
}

fn first_condition(cfg: &Path, tmp: &Path) -> PathBuf {
    let corpus = tmp.join("corpus");
    ok(&run(&["synth-data", "--out", corpus.to_str().unwrap()], Some(cfg)));
    let dir = corpus.join("c0000").join("condition");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files[0].clone()
}

#[test]
fn decipher_is_deterministic_and_reports_distinct_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    train_all(&cfg);
    let input = first_condition(&cfg, tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&run(&["decipher", "--input", input.to_str().unwrap(), "--out", d.to_str().unwrap(), "--trials", "1", "--seed", "5"], Some(&cfg)));
    }
    let stem = input.file_stem().unwrap().to_str().unwrap();
    let file = format!("{stem}_00.png");
    assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap());
    assert!(a.join("montage.png").exists());

    let many = tmp.path().join("many");
    ok(&run(&["decipher", "--input", input.to_str().unwrap(), "--out", many.to_str().unwrap(), "--trials", "10"], Some(&cfg)));
    let report: toml::Table = toml::from_str(&fs::read_to_string(many.join("report.toml")).unwrap()).unwrap();
    let seeds = report["seeds"].as_array().unwrap();
    let distinct: std::collections::BTreeSet<i64> = seeds.iter().map(|s| s.as_integer().unwrap()).collect();
    assert_eq!(distinct.len(), 10);
    let (_, h, w) = decipher_core::image::read_gray(&many.join("montage.png")).unwrap();
    assert_eq!((w, h), (160, 16));
}

#[test]
fn no_refine_returns_the_raw_initial_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    train_all(&cfg);
    let input = first_condition(&cfg, tmp.path());
    let out = tmp.path().join("raw");
    ok(&run(&["decipher", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9", "--no-refine"], Some(&cfg)));
    let c = RunConfig::load(&cfg).unwrap();
    let arch = ParameterArchive::load(&c.output_dir.join("initial_lss")).unwrap();
    let p = Pipeline::new(&c, SamplerMode::Lss, &arch, None).unwrap();
    let (px, h, w) = decipher_core::image::read_gray(&input).unwrap();
    let gray: Vec<f32> = px.into_iter().map(decipher_core::image::from_u8).collect();
    let cond = decipher_core::image::GlyphImage::from_gray(&gray, h, w, 1, decipher_core::image::Role::Condition, None).unwrap();
    let want = p.initial(&cond, 9).unwrap();
    let stem = input.file_stem().unwrap().to_str().unwrap();
    let (got, _, _) = decipher_core::image::read_gray(&out.join(format!("{stem}_00.png"))).unwrap();
    assert_eq!(got, want.to_gray8().into_raw());
    assert!(load_reference(&c.output_dir.join("refiner"), 1).is_ok());
}

#[test]
fn missing_archives_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let input = first_condition(&cfg, tmp.path());
    let out = run(&["decipher", "--input", input.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"not an image").unwrap();
    ok(&run(&["train-initial", "--epochs", "0"], Some(&cfg)));
    let out = run(&["decipher", "--no-refine", "--input", bad.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_writes_monotone_reports_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    train_all(&cfg);
    ok(&run(&["evaluate"], Some(&cfg)));
    let dir = RunConfig::load(&cfg).unwrap().output_dir.join("evaluation");
    let first = fs::read(dir.join("lss_refine_single_round.toml")).unwrap();
    let csv = fs::read_to_string(dir.join("lss_refine_multi_round.csv")).unwrap();
    assert!(csv.starts_with("metric,index,value"));
    ok(&run(&["evaluate"], Some(&cfg)));
    assert_eq!(fs::read(dir.join("lss_refine_single_round.toml")).unwrap(), first);
}
