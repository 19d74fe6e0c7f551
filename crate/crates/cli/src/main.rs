//! `decipher`: synthesize corpora, train the models, decipher glyph images,
//! evaluate and run the ablation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use decipher_core::archive::{ArchiveKind, ParameterArchive};
use decipher_core::config::{DataSource, RunConfig, CONFIG_ENV};
use decipher_core::denoiser::TrainOptions;
use decipher_core::evaluator::{eval_items, evaluate_trials, train_ocr, CachedDecipherer, Classifier, Ranker};
use decipher_core::glyph_data::{synth_corpus, SynthSpec, MANIFEST_FILE};
use decipher_core::image::GlyphImage;
use decipher_core::pipeline::{
    decipher_candidates, exemplar, load_condition, load_reference, multi_round_items, prepare, run_ablation, save_reference, train_initial_model,
    train_refiner_model, write_montage, Candidate, Pipeline, RunPaths, SamplerMode,
};
use decipher_core::Error;

#[derive(Parser)]
#[command(name = "decipher", version, about = "Ancient-glyph decipherment with patch-based conditional diffusion")]
struct Cli {
    /// Run configuration (TOML). Defaults to the file named by DECIPHER_CONFIG.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Start from the scaled-down single-CPU settings instead of the full defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Global seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for archives and reports (overrides the config).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Worker threads. Work is executed sequentially; values above 1 are accepted for compatibility.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic glyph corpus and its manifest.
    SynthData(SynthArgs),
    /// Train the initial decipherment model.
    TrainInitial(TrainArgs),
    /// Train the style refiner on font-to-font pairs.
    TrainRefiner(TrainArgs),
    /// Train the evaluation classifier on modern renderings.
    TrainOcr(OcrArgs),
    /// Generate candidate decipherments for images.
    Decipher(DecipherArgs),
    /// Single- and multi-round evaluation on the held-out categories.
    Evaluate(EvalArgs),
    /// Train and compare whole-image, patched and patched+refined arms.
    Ablate,
    /// Print the fully resolved configuration.
    PrintConfig,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    variants: Option<usize>,
    #[arg(long)]
    styles: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CorpusArg {
    /// Corpus directory to ingest instead of the configured data source.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Treat dark pixels as ink when ingesting.
    #[arg(long)]
    invert: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Sampler the initial model is trained for (ignored by train-refiner).
    #[arg(long, default_value = "lss")]
    mode: SamplerMode,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Archive directory (defaults under the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the archive already in the output directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    corpus: CorpusArg,
}

#[derive(Args)]
struct OcrArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArg,
}

#[derive(Args)]
struct DecipherArgs {
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value = "lss")]
    mode: SamplerMode,
    /// Skip refinement and keep the initial samples.
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    initial: Option<PathBuf>,
    #[arg(long)]
    refiner: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "lss")]
    mode: SamplerMode,
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    corpus: CorpusArg,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 4,
            Error::AcceptanceBar(_) => 5,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn data(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if cli.desk => RunConfig::desk(),
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    if cfg.workers > 1 {
        warn!("--workers {} requested; execution is sequential", cfg.workers);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = resolve_config(&cli)?;
    match cli.cmd {
        Command::SynthData(a) => synth_data(&cfg, a, cli.seed),
        Command::TrainInitial(a) => {
            apply_corpus(&mut cfg, &a.corpus)?;
            train_initial_cmd(&cfg, a)
        }
        Command::TrainRefiner(a) => {
            apply_corpus(&mut cfg, &a.corpus)?;
            train_refiner_cmd(&cfg, a)
        }
        Command::TrainOcr(a) => {
            apply_corpus(&mut cfg, &a.corpus)?;
            train_ocr_cmd(&cfg, a)
        }
        Command::Decipher(a) => decipher_cmd(&cfg, a),
        Command::Evaluate(a) => {
            apply_corpus(&mut cfg, &a.corpus)?;
            evaluate_cmd(&cfg, a)
        }
        Command::Ablate => ablate_cmd(&cfg),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn apply_corpus(cfg: &mut RunConfig, c: &CorpusArg) -> CmdResult {
    if let Some(p) = &c.corpus {
        if !p.join(MANIFEST_FILE).exists() && !p.is_dir() {
            return Err(data(format!("corpus directory {} not found", p.display())));
        }
        cfg.data.source = DataSource::Real { path: p.clone(), invert: c.invert };
    }
    Ok(())
}

fn synth_data(cfg: &RunConfig, a: SynthArgs, seed: Option<u64>) -> CmdResult {
    let mut spec = match &cfg.data.source {
        DataSource::Synthetic(s) => s.clone(),
        DataSource::Real { .. } => SynthSpec { image_size: cfg.image_size, channels: cfg.channels, ..SynthSpec::default() },
    };
    spec.categories = a.categories.unwrap_or(spec.categories);
    spec.variants = a.variants.unwrap_or(spec.variants);
    spec.styles = a.styles.unwrap_or(spec.styles);
    spec.image_size = a.image_size.unwrap_or(spec.image_size);
    spec.channels = a.channels.unwrap_or(spec.channels);
    if let Some(s) = seed {
        spec.seed = s;
    }
    if [spec.categories, spec.variants, spec.styles, spec.image_size, spec.channels].contains(&0) {
        return Err(usage("categories, variants, styles, image size and channels must all be at least 1"));
    }
    if a.out.exists() {
        let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(true);
        if non_empty && !a.force {
            return Err(data(format!("{} exists and is not empty (use --force)", a.out.display())));
        }
        if non_empty {
            fs::remove_dir_all(&a.out).map_err(|e| data(format!("clearing {}: {e}", a.out.display())))?;
        }
    }
    let corpus = synth_corpus(&spec)?;
    let manifest = corpus.write(&a.out)?;
    println!("wrote {} images in {} categories to {} (digest {})", corpus.image_count(), corpus.categories.len(), a.out.display(), manifest.digest);
    Ok(())
}

fn resume_from(dir: &Path, resume: bool, kind: ArchiveKind) -> Result<Option<ParameterArchive>, Failure> {
    if !resume {
        return Ok(None);
    }
    if !dir.join("manifest.toml").exists() {
        return Err(data(format!("nothing to resume in {}", dir.display())));
    }
    let a = ParameterArchive::load(dir)?;
    a.expect_kind(kind)?;
    Ok(Some(a))
}

fn train_initial_cmd(cfg: &RunConfig, a: TrainArgs) -> CmdResult {
    let mut cfg = cfg.clone();
    if let Some(e) = a.epochs {
        cfg.denoiser.epochs = e;
        cfg.denoiser.max_steps = None;
    }
    if a.max_steps.is_some() {
        cfg.denoiser.max_steps = a.max_steps;
    }
    let dir = a.out.unwrap_or_else(|| RunPaths::new(&cfg.output_dir).initial(a.mode));
    let prep = prepare(&cfg)?;
    let resume = resume_from(&dir, a.resume, ArchiveKind::Denoiser)?;
    let opts = TrainOptions { seed: cfg.seed, checkpoint_dir: Some(&dir), resume, config_digest: cfg.digest()? };
    let archive = train_initial_model(&cfg, &prep.train, a.mode, opts)?;
    archive.save(&dir)?;
    println!("initial model ({}) trained for {} steps -> {}", a.mode.as_str(), archive.manifest.training.step, dir.display());
    Ok(())
}

fn train_refiner_cmd(cfg: &RunConfig, a: TrainArgs) -> CmdResult {
    let mut cfg = cfg.clone();
    if let Some(e) = a.epochs {
        cfg.refiner.epochs = e;
        cfg.refiner.max_steps = None;
    }
    if a.max_steps.is_some() {
        cfg.refiner.max_steps = a.max_steps;
    }
    let dir = a.out.unwrap_or_else(|| RunPaths::new(&cfg.output_dir).refiner());
    let prep = prepare(&cfg)?;
    let resume = resume_from(&dir, a.resume, ArchiveKind::Refiner)?;
    let opts = TrainOptions { seed: cfg.seed, checkpoint_dir: Some(&dir), resume, config_digest: cfg.digest()? };
    let archive = train_refiner_model(&cfg, &prep.train, opts)?;
    archive.save(&dir)?;
    save_reference(&dir, &exemplar(&prep.train)?)?;
    println!("refiner trained for {} steps -> {}", archive.manifest.training.step, dir.display());
    Ok(())
}

fn train_ocr_cmd(cfg: &RunConfig, a: OcrArgs) -> CmdResult {
    let mut ccfg = cfg.classifier.clone();
    if let Some(e) = a.epochs {
        ccfg.epochs = e;
    }
    let dir = a.out.unwrap_or_else(|| RunPaths::new(&cfg.output_dir).classifier());
    let corpus = decipher_core::pipeline::load_corpus(cfg)?;
    let mut t = train_ocr(&corpus, &ccfg, cfg.seed)?;
    t.archive.manifest.config_digest = cfg.digest()?;
    t.archive.save(&dir)?;
    println!(
        "classifier: {:.2}% held-in, {:.2}% canonical accuracy -> {}",
        100.0 * t.held_in_accuracy,
        100.0 * t.canonical_accuracy,
        dir.display()
    );
    Ok(())
}

fn load_archive(path: &Path, what: &str) -> Result<ParameterArchive, Failure> {
    if !path.join("manifest.toml").exists() {
        return Err(data(format!("{what} archive not found at {}", path.display())));
    }
    Ok(ParameterArchive::load(path)?)
}

fn build_pipeline(cfg: &RunConfig, mode: SamplerMode, initial: Option<PathBuf>, refiner: Option<PathBuf>, refine: bool) -> Result<Pipeline, Failure> {
    let paths = RunPaths::new(&cfg.output_dir);
    let initial = load_archive(&initial.unwrap_or_else(|| paths.initial(mode)), "initial model")?;
    if initial.manifest.config_digest != cfg.digest()? {
        warn!("initial model was trained under a different configuration digest");
    }
    let refiner = if refine {
        let dir = refiner.unwrap_or_else(|| paths.refiner());
        let arch = load_archive(&dir, "refiner")?;
        Some((arch, load_reference(&dir, cfg.channels)?))
    } else {
        None
    };
    Ok(Pipeline::new(cfg, mode, &initial, refiner.as_ref().map(|(a, r)| (a, r.clone())))?)
}

fn read_condition(path: &Path, cfg: &RunConfig) -> Result<GlyphImage, Failure> {
    Ok(load_condition(path, cfg.image_size, cfg.channels)?)
}

fn input_files(input: &Path) -> Result<Vec<PathBuf>, Failure> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(data(format!("input {} not found", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| data(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png") || x.eq_ignore_ascii_case("bmp")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(data(format!("no images in {}", input.display())));
    }
    Ok(files)
}

#[derive(Serialize)]
struct InputReport {
    input: String,
    candidates: Vec<Candidate>,
}

#[derive(Serialize)]
struct DecipherReport {
    config_digest: String,
    pipeline_digest: String,
    refined: bool,
    seeds: Vec<u64>,
    inputs: Vec<InputReport>,
}

fn decipher_cmd(cfg: &RunConfig, a: DecipherArgs) -> CmdResult {
    if a.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let refine = !a.no_refine;
    let pipeline = build_pipeline(cfg, a.mode, a.initial, a.refiner, refine)?;
    let clf_dir = a.classifier.unwrap_or_else(|| RunPaths::new(&cfg.output_dir).classifier());
    let classifier = if clf_dir.join("manifest.toml").exists() { Some(Classifier::load(&clf_dir)?) } else { None };
    let seeds: Vec<u64> = (0..a.trials as u64).map(|i| cfg.seed + i).collect();
    let mut rows = Vec::new();
    let mut inputs = Vec::new();
    let mut text = String::new();
    for file in input_files(&a.input)? {
        let cond = read_condition(&file, cfg)?;
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "input".into());
        let (images, cands) =
            decipher_candidates(&pipeline, classifier.as_ref().map(|c| c as &dyn Ranker), &cond, &seeds, refine, &a.out, &stem)?;
        text.push_str(&format!("{}\n", file.display()));
        for c in &cands {
            let top: Vec<String> = c.top.iter().map(|(k, p)| format!("{k}:{p:.4}")).collect();
            text.push_str(&format!("  seed {:>20}  {}  {}\n", c.seed, c.file, top.join(" ")));
        }
        rows.push(images);
        inputs.push(InputReport { input: file.display().to_string(), candidates: cands });
    }
    write_montage(&rows, &a.out.join("montage.png"))?;
    let report = DecipherReport {
        config_digest: cfg.digest()?,
        pipeline_digest: decipher_core::evaluator::Decipherer::digest(&pipeline),
        refined: refine,
        seeds,
        inputs,
    };
    let toml_text = toml::to_string(&report).map_err(|e| data(e.to_string()))?;
    write_file(&a.out.join("report.toml"), &toml_text)?;
    write_file(&a.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| data(format!("{}: {e}", path.display())))
}

fn evaluate_cmd(cfg: &RunConfig, a: EvalArgs) -> CmdResult {
    let paths = RunPaths::new(&cfg.output_dir);
    let refine = !a.no_refine;
    let pipeline = build_pipeline(cfg, a.mode, None, None, refine)?;
    let classifier = Classifier::from_archive(&load_archive(&paths.classifier(), "classifier")?)?;
    let prep = prepare(cfg)?;
    let items = eval_items(&prep.test);
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("evaluation"));
    let name = format!("{}{}", a.mode.as_str(), if refine { "_refine" } else { "" });
    let cache = CachedDecipherer::new(&pipeline, Some(out.join("generations").join(&name)), cfg.channels);
    let single = evaluate_trials(&items, &cache, &classifier, &cfg.eval.ks, &[cfg.eval.seed])?;
    single.check()?;
    single.write(&out, &format!("{name}_single_round"))?;
    let sub = multi_round_items(&items, cfg.eval.multi_round_variants);
    let multi = evaluate_trials(&sub, &cache, &classifier, &[1], &cfg.eval.trial_seeds())?;
    multi.check()?;
    multi.write(&out, &format!("{name}_multi_round"))?;
    for (k, v) in single.ks.iter().zip(&single.top_k) {
        println!("top-{k}: {:.1}%", 100.0 * v);
    }
    for (m, v) in multi.cumulative.iter().enumerate() {
        println!("trials {}: {:.1}%", m + 1, 100.0 * v);
    }
    info!("reports written to {}", out.display());
    Ok(())
}

fn ablate_cmd(cfg: &RunConfig) -> CmdResult {
    let report = run_ablation(cfg, &cfg.output_dir)?;
    print!("{}", report.table());
    let mut ok = true;
    for c in report.checks()? {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure { code: 5, message: "ablation ordering not reproduced".into() })
    }
}
