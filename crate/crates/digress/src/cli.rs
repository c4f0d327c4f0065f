//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use digress_core::backend::toy::{ToyBackend, ToyConfig};
use digress_core::backend::train::{train_toy_backend, TrainConfig};
use digress_core::backend::InpaintDenoiser;
use digress_core::centroid;
use digress_core::eval;
use digress_core::inversion;
use digress_core::Tensor;

use crate::checkpoint::{self, TrainingRecord};
use crate::config::{parse_fraction, Fraction, RunConfig};
use crate::corpus;
use crate::error::{AppError, Result, StageExt};
use crate::io;
use crate::pipeline::{self, RunManifest};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "digress", version, about = "Protect images against diffusion inpainting edits")]
pub struct Cli {
    /// Model checkpoint; defaults to the bundled toy model.
    #[arg(long, global = true, env = "DIGRESS_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    /// TOML run configuration. Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress progress on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute an immunizing perturbation for one image.
    Immunize(ImmunizeArgs),
    /// Recover a prompt embedding for the context region.
    Invert(InvertArgs),
    /// Estimate the semantic centroid of the clean context.
    Centroid(CentroidArgs),
    /// Hidden-state eigenfeature similarity across timesteps.
    AnalyzeTimesteps(AnalyzeArgs),
    /// Run the inpainting sampler.
    Inpaint(InpaintArgs),
    /// Compare inpaintings of a clean and an immunized image.
    Evaluate(EvaluateArgs),
    /// Apply one augmentation to an image.
    Augment(AugmentArgs),
    /// Train the toy backend on a synthetic corpus.
    TrainToy(TrainArgs),
}

#[derive(Debug, Args)]
pub struct Pair {
    /// RGB image; its size must match the model.
    #[arg(long)]
    pub image: PathBuf,
    /// Grayscale mask; white marks context to keep.
    #[arg(long)]
    pub mask: PathBuf,
    /// Output directory [default: $DIGRESS_OUT/<command> or digress-out/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImmunizeArgs {
    #[command(flatten)]
    pub pair: Pair,
    /// Perturbation radius in [0,1] pixel units, number or a/b [default: 12/255].
    #[arg(long, value_parser = parse_fraction)]
    pub epsilon: Option<f64>,
    /// Step size, number or a/b [default: 3/255].
    #[arg(long, value_parser = parse_fraction)]
    pub step_size: Option<f64>,
    /// Attack iterations [default: 250].
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Noise draws averaged per gradient [default: 7].
    #[arg(long)]
    pub grad_avg: Option<usize>,
    /// linf or l2 [default: linf].
    #[arg(long)]
    pub norm: Option<String>,
    /// Centroid samples [default: 32].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Centroid prompt: inverted or null [default: inverted].
    #[arg(long)]
    pub text: Option<String>,
    /// Re-estimate the centroid each iteration instead of freezing it.
    #[arg(long)]
    pub live_centroid: bool,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[command(flatten)]
    pub pair: Pair,
    /// Prompt length in tokens [default: 8].
    #[arg(long)]
    pub num_tokens: Option<usize>,
    /// Optimization steps [default: 200].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Step size on the continuous prompt.
    #[arg(long)]
    pub step_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CentroidArgs {
    #[command(flatten)]
    pub pair: Pair,
    /// Prompt embedding dump; the null prompt when absent.
    #[arg(long)]
    pub tau: Option<PathBuf>,
    /// Number of noise draws [default: 32].
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Repeatable; curves are averaged over the images [default: first three corpus images].
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// One per image.
    #[arg(long)]
    pub mask: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<PathBuf>,
    /// start:stop:step, inclusive.
    #[arg(long, default_value = "20:1000:20")]
    pub grid: String,
    /// Noise draws per timestep.
    #[arg(long, default_value_t = 4)]
    pub draws: usize,
}

#[derive(Debug, Args)]
pub struct InpaintArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long, default_value_t = eval::DEFAULT_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub immunized: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prompt embedding dump; the null prompt when absent.
    #[arg(long)]
    pub tau: Option<PathBuf>,
    /// Comma-separated strengths [default: 0.8,0.9,1.0].
    #[arg(long, value_delimiter = ',')]
    pub strengths: Option<Vec<f64>>,
    /// Comma-separated sampler seeds [default: 0,1,2,3].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated augmentations.
    #[arg(long, value_delimiter = ',')]
    pub augmentations: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// gaussian_noise, jpeg, jitter or rotate_crop.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory [default: the bundled corpus].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Generate a corpus of this many images into --corpus first.
    #[arg(long)]
    pub generate: Option<usize>,
    /// Checkpoint to write; a JSON sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub learning_rate: f64,
}

impl Cli {
    /// Defaults, then `--config`, then flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        match &self.command {
            Command::Immunize(a) => {
                let b = &mut cfg.budget;
                set(&mut b.epsilon, a.epsilon.map(Fraction));
                set(&mut b.step_size, a.step_size.map(Fraction));
                set(&mut b.iterations, a.iterations);
                set(&mut b.grad_avg, a.grad_avg);
                set(&mut b.norm, a.norm.clone());
                set(&mut cfg.centroid.samples, a.samples);
                set(&mut cfg.centroid.text, a.text.clone());
                cfg.centroid.live |= a.live_centroid;
            }
            Command::Invert(a) => {
                set(&mut cfg.inversion.num_tokens, a.num_tokens);
                set(&mut cfg.inversion.steps, a.steps);
                set(&mut cfg.inversion.step_size, a.step_size);
            }
            Command::Centroid(a) => set(&mut cfg.centroid.samples, a.samples),
            Command::Evaluate(a) => {
                set(&mut cfg.eval.strengths, a.strengths.clone());
                set(&mut cfg.eval.seeds, a.seeds.clone());
                set(&mut cfg.eval.steps, a.steps);
                set(&mut cfg.eval.augmentations, a.augmentations.clone());
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn progress(quiet: bool) -> impl FnMut(&str) {
    move |msg| {
        if !quiet {
            eprintln!("{msg}");
        }
    }
}

fn out_dir(flag: Option<&Path>, command: &str) -> Result<PathBuf> {
    let d = pipeline::output_dir(flag, command);
    std::fs::create_dir_all(&d).map_err(|e| AppError::output(&d, e))?;
    Ok(d)
}

fn read_tau(path: Option<&Path>, backend: &ToyBackend, cfg: &RunConfig) -> Result<Tensor> {
    match path {
        Some(p) => io::read_tensors(p)?
            .into_iter()
            .next()
            .map(|(_, t)| t)
            .ok_or_else(|| AppError::format(p, "empty tensor dump")),
        None => backend.null_text_embedding(cfg.inversion.num_tokens).stage("null text"),
    }
}

/// Explicit image/mask pairs, or the first corpus entries when none are given.
fn analysis_pairs(images: &[PathBuf], masks: &[PathBuf]) -> Result<Vec<(PathBuf, PathBuf)>> {
    if images.len() != masks.len() {
        return Err(AppError::Usage(format!("{} images but {} masks", images.len(), masks.len())));
    }
    if !images.is_empty() {
        return Ok(images.iter().cloned().zip(masks.iter().cloned()).collect());
    }
    let dir = checkpoint::bundled_corpus();
    let index = corpus::read_index(&dir)?;
    Ok(index
        .entries
        .iter()
        .take(pipeline::ANALYSIS_IMAGES)
        .map(|e| (dir.join(&e.image), dir.join(&e.mask)))
        .collect())
}

/// Runs the parsed command.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    let quiet = cli.quiet;
    if let Command::TrainToy(a) = &cli.command {
        return train(a, &cfg, quiet);
    }
    let (backend, ckpt) = pipeline::load_backend(cli.checkpoint.as_deref())?;
    match &cli.command {
        Command::Immunize(a) => {
            let out = out_dir(a.pair.out.as_deref(), "immunize")?;
            let r = pipeline::immunize(&backend, &ckpt, &a.pair.image, &a.pair.mask, &cfg, &out, progress(quiet))?;
            println!(
                "{} loss {:.6} -> {:.6}",
                r.immunized.display(),
                r.trace.initial_loss(),
                r.trace.final_loss()
            );
        }
        Command::Invert(a) => {
            let out = out_dir(a.pair.out.as_deref(), "invert")?;
            let inputs = pipeline::load_inputs(&backend, &a.pair.image, &a.pair.mask)?;
            let mut m = RunManifest::new("invert", &cfg);
            m.input("checkpoint", &ckpt)?;
            m.input("image", &a.pair.image)?;
            m.input("mask", &a.pair.mask)?;
            let icfg = cfg.inversion()?;
            let mut log = progress(quiet);
            let r = m.timed("invert", || {
                inversion::invert(&backend, &inputs.image, &inputs.mask, &icfg, |s| {
                    if s.step % 25 == 0 {
                        log(&format!("step {} t {} loss {:.6}", s.step, s.t, s.loss));
                    }
                })
                .stage("invert")
            })?;
            pipeline::write_inversion(&out, &r, &mut m)?;
            m.write(&out)?;
            let ids = r.prompt.vocab_ids.as_deref().unwrap_or(&[]);
            println!("{}", ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "));
        }
        Command::Centroid(a) => {
            let out = out_dir(a.pair.out.as_deref(), "centroid")?;
            let inputs = pipeline::load_inputs(&backend, &a.pair.image, &a.pair.mask)?;
            let tau = read_tau(a.tau.as_deref(), &backend, &cfg)?;
            let mut m = RunManifest::new("centroid", &cfg);
            m.input("checkpoint", &ckpt)?;
            m.input("image", &a.pair.image)?;
            m.input("mask", &a.pair.mask)?;
            let ccfg = cfg.centroid()?;
            let c = m.timed("centroid", || {
                centroid::estimate_centroid(&backend, &inputs.image, &inputs.mask, &tau, &ccfg).stage("centroid")
            })?;
            let p = out.join("centroid.bin");
            pipeline::write_centroid(&p, &c, &cfg)?;
            m.artifact("centroid", &p)?;
            m.write(&out)?;
            println!("{}", p.display());
        }
        Command::AnalyzeTimesteps(a) => {
            let out = out_dir(a.out.as_deref(), "analyze-timesteps")?;
            let pairs = analysis_pairs(&a.image, &a.mask)?;
            let inputs = pairs
                .iter()
                .map(|(i, m)| pipeline::load_inputs(&backend, i, m))
                .collect::<Result<Vec<_>>>()?;
            let tau = read_tau(a.tau.as_deref(), &backend, &cfg)?;
            let grid = parse_grid(&a.grid, backend.spec().max_timestep)?;
            let r = pipeline::analyze_timesteps(&backend, &inputs, &tau, &grid, a.draws, cfg.seed)?;
            report::write_eigen_csv(&out.join("eigenfeatures.csv"), &r)?;
            let curves: Vec<&[f64]> = r.layers.iter().map(|l| l.cosine.as_slice()).collect();
            report::line_plot(&out.join("eigenfeatures.png"), &curves)?;
            io::write_json(
                &out.join("window.json"),
                &serde_json::json!({
                    "window": [r.window.0, r.window.1],
                    "degenerate": r.degenerate,
                }),
            )?;
            println!("window {}..={}", r.window.0, r.window.1);
        }
        Command::Inpaint(a) => {
            let inputs = pipeline::load_inputs(&backend, &a.image, &a.mask)?;
            let tau = read_tau(a.tau.as_deref(), &backend, &cfg)?;
            let run = eval::inpaint(&backend, &inputs.image, &inputs.mask, &tau, a.strength, a.steps, cfg.seed)
                .stage("inpaint")?;
            io::write_png(&a.out, &io::quantize(&run.image))?;
            println!("{}", a.out.display());
        }
        Command::Evaluate(a) => {
            let out = out_dir(a.out.as_deref(), "evaluate")?;
            let clean = pipeline::load_inputs(&backend, &a.clean, &a.mask)?;
            let imm = pipeline::load_inputs(&backend, &a.immunized, &a.mask)?;
            let tau = read_tau(a.tau.as_deref(), &backend, &cfg)?;
            let mut m = RunManifest::new("evaluate", &cfg);
            m.input("checkpoint", &ckpt)?;
            m.input("clean", &a.clean)?;
            m.input("immunized", &a.immunized)?;
            m.input("mask", &a.mask)?;
            let id = a.clean.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let r = m.timed("evaluate", || {
                pipeline::evaluate(&backend, &id, &clean.image, &imm.image, &clean.mask, &tau, &cfg)
            })?;
            let (rows, summary) = (out.join("rows.csv"), out.join("summary.csv"));
            report::write_eval_csv(&rows, &summary, &r)?;
            m.artifact("rows", &rows)?;
            m.artifact("summary", &summary)?;
            m.write(&out)?;
            for s in r.summary() {
                println!("strength {} aug {} ssim {:.4} psnr {:.2}", s.strength, s.aug, s.mean_ssim, s.mean_psnr);
            }
        }
        Command::Augment(a) => {
            let img = io::read_image(&a.image)?;
            let out = pipeline::augment_by_name(&img, &a.kind, cfg.seed)?;
            io::write_png(&a.out, &io::quantize(&out))?;
            println!("{}", a.out.display());
        }
        Command::TrainToy(_) => unreachable!(),
    }
    Ok(())
}

fn parse_grid(s: &str, max_t: usize) -> Result<Vec<usize>> {
    let bad = || AppError::Usage(format!("--grid expects start:stop:step, got {s:?}"));
    let parts: Vec<usize> = s.split(':').map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    if step == 0 || start == 0 || start > stop || stop > max_t {
        return Err(bad());
    }
    Ok((start..=stop).step_by(step).collect())
}

fn train(a: &TrainArgs, cfg: &RunConfig, quiet: bool) -> Result<()> {
    let dir = a.corpus.clone().unwrap_or_else(checkpoint::bundled_corpus);
    let toy = ToyConfig::default();
    if let Some(n) = a.generate {
        corpus::write_corpus(&dir, n, toy.pixel_size, toy.downsample, cfg.seed)?;
    }
    let samples = corpus::load_samples(&dir)?;
    let corpus_sha = io::sha256_file(&dir.join(corpus::INDEX_FILE))?;
    let mut backend = ToyBackend::new(toy).stage("train-toy")?;
    let tcfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut log = progress(quiet);
    let mut acc = 0.0;
    let r = train_toy_backend(&mut backend, &samples, &tcfg, |s, l| {
        acc += l;
        if (s + 1) % 100 == 0 {
            log(&format!("step {} mean loss {:.5}", s + 1, acc / 100.0));
            acc = 0.0;
        }
    })
    .stage("train-toy")?;
    checkpoint::save(&a.out, &backend, Some(TrainingRecord::new(&tcfg, &r, corpus_sha)))?;
    println!(
        "{} probe loss {:.5} -> {:.5}",
        a.out.display(),
        r.initial_probe_loss,
        r.final_probe_loss
    );
    Ok(())
}
