//! Pipeline stages over files: each stage reads its inputs, calls into
//! `digress-core` and writes its artifacts. The CLI is a thin layer on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use digress_core::attack::{self, AttackTarget, AttackTrace, PgdOptions, Stopwatch};
use digress_core::backend::toy::ToyBackend;
use digress_core::backend::InpaintDenoiser;
use digress_core::centroid::{self, CentroidLayer, LayerWeights, SemanticCentroid};
use digress_core::eval::{self, Augmentation, Augmenter, EvalReport};
use digress_core::inversion::{self, InversionResult};
use digress_core::masking::{ContextImage, InpaintMask, Perturbation};
use digress_core::timestep::{self, EigenfeatureReport};
use digress_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{AppError, Result, StageExt};
use crate::io;
use crate::jpeg::Jpeg;
use crate::report;

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "DIGRESS_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: &str = "1";

/// Wall clock for attack traces.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        Self(Instant::now())
    }
}

impl Stopwatch for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// The checkpoint at `path`, or the bundled one.
pub fn load_backend(path: Option<&Path>) -> Result<(ToyBackend, PathBuf)> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(checkpoint::bundled_checkpoint);
    let (b, _) = checkpoint::load(&p)?;
    Ok((b, p))
}

pub struct Inputs {
    pub image: ContextImage,
    pub mask: InpaintMask,
}

pub fn load_inputs(backend: &ToyBackend, image: &Path, mask: &Path) -> Result<Inputs> {
    let spec = backend.spec();
    let pixels = io::read_image(image)?;
    if pixels.shape() != spec.pixel_shape {
        return Err(AppError::format(
            image,
            format!("image is {:?}, the backend expects {:?}", pixels.shape(), spec.pixel_shape),
        ));
    }
    let mask = io::read_mask(mask, spec.downsample_factor())?;
    if mask.pixel_grid().shape()[1..] != spec.pixel_shape[1..] {
        return Err(AppError::Usage("mask and image sizes differ".into()));
    }
    let image = ContextImage::new(backend, pixels, image.display().to_string()).stage("load inputs")?;
    Ok(Inputs { image, mask })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: io::sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// One per run: enough to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: String,
    pub tool_version: String,
    pub command: String,
    pub config: RunConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, FileRecord>,
    pub artifacts: BTreeMap<String, FileRecord>,
    pub stages: Vec<StageTiming>,
    /// Scalar outcomes worth keeping next to the artifacts.
    pub results: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let mut seeds = BTreeMap::new();
        seeds.insert("root".to_string(), config.seed);
        Self {
            manifest_version: MANIFEST_VERSION.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            seeds,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            stages: Vec::new(),
            results: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) -> Result<()> {
        self.inputs.insert(key.into(), FileRecord::of(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, key: &str, path: &Path) -> Result<()> {
        self.artifacts.insert(key.into(), FileRecord::of(path)?);
        Ok(())
    }

    /// Runs `f` and records its duration under `stage`.
    pub fn timed<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(MANIFEST_FILE);
        io::write_json(&p, self)?;
        Ok(p)
    }
}

/// The prompt the centroid and attack condition on.
pub struct TextCondition {
    pub tau: Tensor,
    pub inversion: Option<InversionResult>,
}

pub fn text_condition(backend: &ToyBackend, inputs: &Inputs, cfg: &RunConfig) -> Result<TextCondition> {
    let inv_cfg = cfg.inversion()?;
    match cfg.centroid.text.as_str() {
        "null" => Ok(TextCondition {
            tau: backend.null_text_embedding(inv_cfg.num_tokens).stage("null text")?,
            inversion: None,
        }),
        _ => {
            let r = inversion::invert(backend, &inputs.image, &inputs.mask, &inv_cfg, |_| {}).stage("invert")?;
            Ok(TextCondition {
                tau: r.tau.clone(),
                inversion: Some(r),
            })
        }
    }
}

pub fn layer_weights(centroid: &SemanticCentroid, cfg: &RunConfig) -> Result<LayerWeights> {
    if cfg.centroid.layers.is_empty() {
        return Ok(LayerWeights::uniform(centroid.layers().len()));
    }
    let ids: Vec<&str> = cfg.centroid.layers.iter().map(String::as_str).collect();
    LayerWeights::select(centroid, &ids).map_err(|e| AppError::Config(e.to_string()))
}

pub fn write_inversion(dir: &Path, r: &InversionResult, m: &mut RunManifest) -> Result<()> {
    let pi = dir.join("pi.bin");
    io::write_tensors(&pi, &[("pi".into(), r.prompt.pi.clone())])?;
    m.artifact("pi", &pi)?;
    let tau = dir.join("tau.bin");
    io::write_tensors(&tau, &[("tau".into(), r.tau.clone())])?;
    m.artifact("tau", &tau)?;
    let ids = dir.join("tokens.json");
    io::write_json(&ids, &r.prompt.vocab_ids)?;
    m.artifact("tokens", &ids)?;
    let csv = dir.join("inversion_loss.csv");
    report::write_series_csv(&csv, "step", &["loss"], &[&r.losses])?;
    m.artifact("inversion_loss", &csv)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSidecar {
    pub sample_count: usize,
    pub layers: Vec<String>,
    pub context_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub timestep_mean: f64,
    pub timestep_std: f64,
    pub timestep_min: usize,
    pub timestep_max: usize,
    pub standard_errors: Vec<f64>,
}

pub fn write_centroid(path: &Path, c: &SemanticCentroid, cfg: &RunConfig) -> Result<()> {
    let mut tensors = Vec::new();
    for l in c.layers() {
        tensors.push((format!("{}.mean", l.id), l.mean.clone()));
        tensors.push((format!("{}.variance", l.id), l.variance.clone()));
    }
    io::write_tensors(path, &tensors)?;
    let d = cfg.timestep()?;
    io::write_json(
        &path.with_extension("json"),
        &CentroidSidecar {
            sample_count: c.sample_count(),
            layers: c.layers().iter().map(|l| l.id.clone()).collect(),
            context_hash: format!("{:016x}", c.context_hash()),
            config_hash: format!("{:016x}", c.config_hash()),
            seed: cfg.seed,
            timestep_mean: d.mean,
            timestep_std: d.std,
            timestep_min: d.clamp_range.0,
            timestep_max: d.clamp_range.1,
            standard_errors: c.standard_errors(),
        },
    )
}

pub fn read_centroid(path: &Path) -> Result<SemanticCentroid> {
    let side: CentroidSidecar = io::read_json(&path.with_extension("json"))?;
    let mut tensors = io::read_tensors(path)?.into_iter();
    let mut layers = Vec::new();
    for id in &side.layers {
        let (Some((mn, mean)), Some((vn, variance))) = (tensors.next(), tensors.next()) else {
            return Err(AppError::format(path, "missing centroid layer"));
        };
        if mn != format!("{id}.mean") || vn != format!("{id}.variance") {
            return Err(AppError::format(path, format!("unexpected tensors {mn}, {vn}")));
        }
        layers.push(CentroidLayer {
            id: id.clone(),
            mean,
            variance,
        });
    }
    let parse = |s: &str| u64::from_str_radix(s, 16).map_err(|_| AppError::format(path, "bad hash"));
    SemanticCentroid::from_parts(layers, side.sample_count, parse(&side.context_hash)?, parse(&side.config_hash)?)
        .map_err(|e| AppError::format(path, e))
}

pub struct ImmunizeOutcome {
    pub manifest: RunManifest,
    pub immunized: PathBuf,
    pub trace: AttackTrace,
    pub perturbation: Perturbation,
}

/// Invert, estimate the centroid, attack, export. Artifacts written before a
/// failing stage stay on disk.
pub fn immunize(
    backend: &ToyBackend,
    checkpoint: &Path,
    image: &Path,
    mask: &Path,
    cfg: &RunConfig,
    out: &Path,
    mut progress: impl FnMut(&str),
) -> Result<ImmunizeOutcome> {
    cfg.validate()?;
    let mut m = RunManifest::new("immunize", cfg);
    m.input("checkpoint", checkpoint)?;
    m.input("image", image)?;
    m.input("mask", mask)?;
    let inputs = load_inputs(backend, image, mask)?;
    std::fs::create_dir_all(out).map_err(|e| AppError::output(out, e))?;

    progress("invert");
    let text = m.timed("invert", || text_condition(backend, &inputs, cfg))?;
    if let Some(r) = &text.inversion {
        write_inversion(out, r, &mut m)?;
        m.results.insert("inversion_final_loss".into(), *r.losses.last().unwrap_or(&f64::NAN));
    }

    progress("centroid");
    let ccfg = cfg.centroid()?;
    let centroid = m.timed("centroid", || {
        centroid::estimate_centroid(backend, &inputs.image, &inputs.mask, &text.tau, &ccfg).stage("centroid")
    })?;
    let cpath = out.join("centroid.bin");
    write_centroid(&cpath, &centroid, cfg)?;
    m.artifact("centroid", &cpath)?;

    progress("attack");
    let weights = layer_weights(&centroid, cfg)?;
    let budget = cfg.budget()?;
    let dist = cfg.timestep()?;
    let target = AttackTarget {
        mask: &inputs.mask,
        tau: &text.tau,
        centroid: &centroid,
        weights: &weights,
    };
    let options = PgdOptions {
        live_centroid: cfg.centroid.live.then(|| ccfg.clone()),
    };
    let clock = WallClock::start();
    let (perturbation, trace) = m.timed("attack", || {
        attack::pgd_ascend(backend, &inputs.image, &target, &dist, &budget, &options, &clock, |k, loss, _| {
            if k % 25 == 0 {
                progress(&format!("attack iteration {k}: loss {loss:.4}"));
            }
        })
        .stage("attack")
    })?;

    progress("export");
    let adv = io::quantize(
        &inputs
            .image
            .pixels()
            .zip_map(&perturbation.delta, |x, d| (x + d).clamp(0.0, 1.0))
            .stage("export")?,
    );
    let immunized = out.join("immunized.png");
    io::write_png(&immunized, &adv)?;
    m.artifact("immunized", &immunized)?;
    let delta = out.join("delta.bin");
    io::write_tensors(&delta, &[("delta".into(), perturbation.delta.clone())])?;
    m.artifact("delta", &delta)?;
    if text.inversion.is_none() {
        let tau = out.join("tau.bin");
        io::write_tensors(&tau, &[("tau".into(), text.tau.clone())])?;
        m.artifact("tau", &tau)?;
    }
    let tcsv = out.join("attack_trace.csv");
    report::write_trace_csv(&tcsv, &trace)?;
    let plot = out.join("attack_loss.png");
    report::line_plot(&plot, &[&trace.losses])?;
    m.results.insert("initial_loss".into(), trace.initial_loss());
    m.results.insert("final_loss".into(), trace.final_loss());
    m.results.insert("best_loss".into(), trace.best_loss);
    m.results.insert("linf".into(), perturbation.delta.max_abs());
    m.write(out)?;
    Ok(ImmunizeOutcome {
        manifest: m,
        immunized,
        trace,
        perturbation,
    })
}

/// Builds the augmentations named in the config.
pub fn augmenters(names: &[String]) -> Result<Vec<Box<dyn Augmenter>>> {
    names
        .iter()
        .map(|n| -> Result<Box<dyn Augmenter>> {
            Ok(match n.as_str() {
                "gaussian_noise" => Box::new(Augmentation::NOISE),
                "jitter" => Box::new(Augmentation::JITTER),
                "rotate_crop" => Box::new(Augmentation::ROTATE),
                "jpeg" => Box::new(Jpeg::default()),
                other => return Err(AppError::Config(format!("unknown augmentation {other:?}"))),
            })
        })
        .collect()
}

pub fn augment_by_name(image: &Tensor, name: &str, seed: u64) -> Result<Tensor> {
    let a = augmenters(&[name.to_string()]).map_err(|_| AppError::Usage(format!("unknown augmentation kind {name:?}")))?;
    a[0].apply(image, seed).stage("augment")
}

/// Oracle-vs-disrupted evaluation over the configured grid.
pub fn evaluate(
    backend: &ToyBackend,
    image_id: &str,
    clean: &ContextImage,
    immunized: &ContextImage,
    mask: &InpaintMask,
    tau: &Tensor,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let ecfg = cfg.eval()?;
    let augs = augmenters(&cfg.eval.augmentations)?;
    let refs: Vec<&dyn Augmenter> = augs.iter().map(|a| a.as_ref()).collect();
    eval::evaluate_pair(backend, image_id, clean, immunized, mask, tau, &ecfg, &refs, &[]).stage("evaluate")
}

/// Hidden-state PCA over `grid` for `seeds` noise draws.
/// Images averaged over by `analyze-timesteps` when none are named.
pub const ANALYSIS_IMAGES: usize = 3;

/// Eigenfeature curves averaged over every trajectory of every image.
pub fn analyze_timesteps(
    backend: &ToyBackend,
    inputs: &[Inputs],
    tau: &Tensor,
    grid: &[usize],
    seeds: usize,
    seed: u64,
) -> Result<EigenfeatureReport> {
    let mut traj = Vec::new();
    for x in inputs {
        let bundles = timestep::collect_hidden_trajectory(backend, &x.image, &x.mask, tau, grid, seeds, seed)
            .stage("analyze-timesteps")?;
        traj.extend(timestep::split_trajectories(bundles, grid.len()));
    }
    timestep::eigenfeature_similarity(&traj).stage("analyze-timesteps")
}

/// `--out`, else `$DIGRESS_OUT/<command>`, else `digress-out/<command>`.
pub fn output_dir(flag: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(command),
        _ => PathBuf::from("digress-out").join(command),
    }
}
