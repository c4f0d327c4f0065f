//! Disruption evaluation: the inpainting sampler, SSIM/PSNR, the robustness
//! augmentations and the paired oracle-vs-disrupted report.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::backend::InpaintDenoiser;
use crate::error::{Error, Result};
use crate::masking::{ContextImage, InpaintMask};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

pub const MIN_STEPS: usize = 10;
pub const MAX_STEPS: usize = 100;
pub const DEFAULT_STEPS: usize = 50;
/// Reported PSNR for identical images, and the ceiling for near-identical ones.
pub const PSNR_CAP: f64 = 100.0;
pub const DEFAULT_STRENGTHS: [f64; 3] = [0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintRun {
    pub strength: f64,
    pub steps: usize,
    pub seed: u64,
    pub t_start: usize,
    pub image: Tensor,
}

/// Denoising timesteps for a run: strictly decreasing from
/// `round(strength * T)`, ending just above zero.
pub fn inpaint_timesteps(max_t: usize, strength: f64, steps: usize) -> Result<Vec<usize>> {
    if !(MIN_STEPS..=MAX_STEPS).contains(&steps) {
        return Err(Error::OutOfRange {
            what: "inpainting steps",
            value: steps as i64,
            min: MIN_STEPS as i64,
            max: MAX_STEPS as i64,
        });
    }
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::validation(alloc::format!("strength {strength} outside (0, 1]")));
    }
    let t_start = (libm::round(strength * max_t as f64) as usize).max(1);
    let n = (libm::round(steps as f64 * strength) as usize).clamp(1, t_start);
    let mut ts: Vec<usize> = (0..n)
        .map(|i| libm::round(t_start as f64 * (n - i) as f64 / n as f64) as usize)
        .collect();
    ts.dedup();
    Ok(ts)
}

/// Ancestral sampling of the inpainting model from `round(strength * T)`.
///
/// At strength 1 the latent starts as pure noise; below 1 it starts from the
/// context image's latent noised to the start timestep. The whole latent is
/// decoded; no pixels are pasted back.
#[allow(clippy::too_many_arguments)]
pub fn inpaint<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    context: &ContextImage,
    mask: &InpaintMask,
    tau: &Tensor,
    strength: f64,
    steps: usize,
    seed: u64,
) -> Result<InpaintRun> {
    let sched = backend.schedule();
    let max_t = backend.spec().max_timestep;
    let ts = inpaint_timesteps(max_t, strength, steps)?;
    let shape = backend.spec().latent_shape;
    let mut r = rng::seeded(rng::derive(seed, streams::INPAINT, 0));
    let noise = rng::normal_tensor(&mut r, &shape);
    let t_start = ts[0];
    let mut z = if t_start >= max_t {
        noise
    } else {
        sched.add_noise(context.latent(), t_start, &noise)?
    };
    for (i, &t) in ts.iter().enumerate() {
        let s = ts.get(i + 1).copied().unwrap_or(0);
        let eps = backend.forward(&z, t, context, mask, tau)?.eps_pred;
        let (mean, std) = sched.ancestral_step(&z, &eps, t, s)?;
        z = if s > 0 {
            let n = rng::normal_tensor(&mut r, &shape);
            mean.zip_map(&n, |m, e| m + std * e)?
        } else {
            mean
        };
        if !z.all_finite() {
            return Err(Error::non_finite("inpainting latent", i));
        }
    }
    Ok(InpaintRun {
        strength,
        steps,
        seed,
        t_start,
        image: backend.decode_image(&z)?,
    })
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(alloc::format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for data range 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP))
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_RADIUS: usize = 5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, w) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *w = libm::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Valid-region separable filter of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let (oh, ow) = (h - 2 * r, w - 2 * r);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kw)| kw * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kw)| kw * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over channels of `[c, h, w]` images with data range 1, an 11x11
/// Gaussian window (sigma 1.5) and population covariances. Windows are only
/// evaluated where they fit entirely inside the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = match *a.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        ref s => return Err(Error::validation(alloc::format!("ssim expects [c, h, w] images, got {s:?}"))),
    };
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return Err(Error::validation(alloc::format!("ssim needs images of at least {win}x{win}")));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * h * w..(ch + 1) * h * w];
        let y = &b.data()[ch * h * w..(ch + 1) * h * w];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let [ux, uy, uxx, uyy, uxy] = [x, y, &xx[..], &yy[..], &xy[..]].map(|p| filter_valid(p, h, w, &k));
        let mut acc = 0.0;
        for i in 0..ux.len() {
            let vx = uxx[i] - ux[i] * ux[i];
            let vy = uyy[i] - uy[i] * uy[i];
            let vxy = uxy[i] - ux[i] * uy[i];
            acc += ((2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2))
                / ((ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2));
        }
        total += acc / ux.len() as f64;
    }
    Ok(total / c as f64)
}

/// Names of the learned metrics that need external networks.
pub const DEEP_METRICS: [&str; 6] = ["lpips", "clip_score", "fid", "kid", "aesthetic", "pickscore"];

/// Learned perceptual metric backed by an external model.
pub trait DeepMetric {
    fn name(&self) -> &str;
    /// `None` when the metric cannot be computed.
    fn score(&self, oracle: &Tensor, disrupted: &Tensor) -> Option<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricPanel {
    pub ssim: f64,
    pub psnr: f64,
    /// `(name, value)`; `None` means the adapter is unavailable.
    pub extras: Vec<(String, Option<f64>)>,
}

impl MetricPanel {
    /// SSIM and PSNR, every name in [`DEEP_METRICS`] filled from `adapters`
    /// when one is registered, otherwise marked absent.
    pub fn compute(oracle: &Tensor, disrupted: &Tensor, adapters: &[&dyn DeepMetric]) -> Result<Self> {
        let extras = DEEP_METRICS
            .iter()
            .map(|&name| {
                let v = adapters
                    .iter()
                    .find(|a| a.name() == name)
                    .and_then(|a| a.score(oracle, disrupted));
                (name.to_string(), v)
            })
            .collect();
        Ok(Self {
            ssim: ssim(oracle, disrupted)?,
            psnr: psnr(oracle, disrupted)?,
            extras,
        })
    }
}

/// An image transformation applied before inpainting.
pub trait Augmenter {
    fn name(&self) -> String;
    fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor>;
}

/// The augmentations that need no external codec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augmentation {
    /// Additive `N(0, sigma^2)` with sigma on the 0..255 scale.
    GaussianNoise { sigma: f64 },
    /// Fixed brightness, contrast and saturation factors, applied in that order.
    Jitter { brightness: f64, contrast: f64, saturation: f64 },
    /// Rotation about the centre, then the largest inscribed centre crop
    /// resized back to the input size.
    RotateCrop { degrees: f64 },
}

impl Augmentation {
    pub const NOISE: Self = Augmentation::GaussianNoise { sigma: 5.0 };
    pub const JITTER: Self = Augmentation::Jitter {
        brightness: 1.1,
        contrast: 1.1,
        saturation: 1.1,
    };
    pub const ROTATE: Self = Augmentation::RotateCrop { degrees: 5.0 };
}

impl Augmenter for Augmentation {
    fn name(&self) -> String {
        match self {
            Augmentation::GaussianNoise { .. } => "gaussian_noise",
            Augmentation::Jitter { .. } => "jitter",
            Augmentation::RotateCrop { .. } => "rotate_crop",
        }
        .to_string()
    }

    fn apply(&self, image: &Tensor, seed: u64) -> Result<Tensor> {
        match *self {
            Augmentation::GaussianNoise { sigma } => gaussian_noise(image, sigma, seed),
            Augmentation::Jitter {
                brightness,
                contrast,
                saturation,
            } => color_jitter(image, brightness, contrast, saturation),
            Augmentation::RotateCrop { degrees } => rotate_crop(image, degrees),
        }
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        ref s => Err(Error::validation(alloc::format!("expected a [c, h, w] image, got {s:?}"))),
    }
}

pub fn gaussian_noise(image: &Tensor, sigma: f64, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::validation("noise sigma must be non-negative"));
    }
    let mut r = rng::seeded(seed);
    let s = sigma / 255.0;
    let d = image.data();
    Ok(Tensor::from_fn(image.shape(), |i| (d[i] + s * rng::standard_normal(&mut r)).clamp(0.0, 1.0)))
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn gray(image: &Tensor, hw: usize) -> Vec<f64> {
    let d = image.data();
    (0..hw)
        .map(|i| LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i])
        .collect()
}

/// Brightness, contrast and saturation blends with fixed factors, each
/// clamped to `[0, 1]`. Contrast blends with the mean luminance, saturation
/// with the per-pixel luminance.
pub fn color_jitter(image: &Tensor, brightness: f64, contrast: f64, saturation: f64) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if c != 3 {
        return Err(Error::validation("colour jitter needs an RGB image"));
    }
    if [brightness, contrast, saturation].iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::validation("jitter factors must be non-negative"));
    }
    let hw = h * w;
    let mut img = image.map(|v| (v * brightness).clamp(0.0, 1.0));
    let mean = gray(&img, hw).iter().sum::<f64>() / hw as f64;
    img = img.map(|v| (contrast * v + (1.0 - contrast) * mean).clamp(0.0, 1.0));
    let g = gray(&img, hw);
    let d = img.data_mut();
    for ch in 0..3 {
        for i in 0..hw {
            let v = &mut d[ch * hw + i];
            *v = (saturation * *v + (1.0 - saturation) * g[i]).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (libm::floor(y), libm::floor(x));
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let mut v = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                v += wgt * at(y0 + dy, x0 + dx);
            }
        }
    }
    v
}

/// Counter-clockwise rotation by `degrees` followed by a centre crop of the
/// largest axis-aligned rectangle free of fill, resized back to `h x w`. Both
/// steps are composed into a single bilinear resampling.
pub fn rotate_crop(image: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if !degrees.is_finite() || degrees.abs() >= 45.0 {
        return Err(Error::validation("rotation must be finite and below 45 degrees"));
    }
    let th = degrees.to_radians();
    let (s, co) = (libm::sin(th), libm::cos(th));
    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    // Extents are measured between pixel centres so bilinear taps never
    // reach outside the source.
    let (a, b) = (libm::fabs(co), libm::fabs(s));
    let (fw, fh) = ((w - 1) as f64, (h - 1) as f64);
    let scale = if fw == 0.0 || fh == 0.0 {
        1.0
    } else {
        (fw / (fw * a + fh * b)).min(fh / (fw * b + fh * a))
    };
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for ch in 0..c {
        let plane = &image.data()[ch * hw..(ch + 1) * hw];
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 - cy) * scale;
                let dx = (x as f64 - cx) * scale;
                let sx = (co * dx - s * dy + cx).clamp(0.0, fw);
                let sy = (s * dx + co * dy + cy).clamp(0.0, fh);
                out[ch * hw + y * w + x] = bilinear(plane, h, w, sy, sx).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub strengths: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strengths: DEFAULT_STRENGTHS.to_vec(),
            seeds: vec![0],
            steps: DEFAULT_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image_id: String,
    pub strength: f64,
    pub seed: u64,
    /// `"none"` for the unaugmented pair.
    pub aug: String,
    pub panel: MetricPanel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strength: f64,
    pub aug: String,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Means per `(strength, aug)`, in first-seen order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out: Vec<SummaryRow> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|s| s.strength == r.strength && s.aug == r.aug) {
                Some(s) => {
                    s.mean_ssim += r.panel.ssim;
                    s.mean_psnr += r.panel.psnr;
                    s.count += 1;
                }
                None => out.push(SummaryRow {
                    strength: r.strength,
                    aug: r.aug.clone(),
                    mean_ssim: r.panel.ssim,
                    mean_psnr: r.panel.psnr,
                    count: 1,
                }),
            }
        }
        for s in &mut out {
            s.mean_ssim /= s.count as f64;
            s.mean_psnr /= s.count as f64;
        }
        out
    }

    pub fn mean_ssim(&self, strength: f64, aug: &str) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.strength == strength && s.aug == aug)
            .map(|s| s.mean_ssim)
    }
}

/// Inpaints the clean and the immunized context with matched seeds for
/// every `(strength, seed, augmentation)` and scores the pair. Augmentations
/// hit both images with the same seed. Rows are ordered strength-major, then
/// seed, then augmentation (`"none"` first).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_pair<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    image_id: &str,
    clean: &ContextImage,
    immunized: &ContextImage,
    mask: &InpaintMask,
    tau: &Tensor,
    cfg: &EvalConfig,
    augmentations: &[&dyn Augmenter],
    adapters: &[&dyn DeepMetric],
) -> Result<EvalReport> {
    if cfg.strengths.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::validation("evaluation needs at least one strength and one seed"));
    }
    clean.pixels().expect_shape(immunized.pixels().shape(), "immunized image")?;
    let mut variants: Vec<(String, ContextImage, ContextImage, u64)> = Vec::new();
    let mut rows = Vec::new();
    for &strength in &cfg.strengths {
        for &seed in &cfg.seeds {
            if variants.is_empty() || variants[0].3 != seed {
                variants = build_variants(backend, clean, immunized, augmentations, seed)?;
            }
            for (aug, c, i, _) in &variants {
                let oracle = inpaint(backend, c, mask, tau, strength, cfg.steps, seed)?;
                let disrupted = inpaint(backend, i, mask, tau, strength, cfg.steps, seed)?;
                rows.push(EvalRow {
                    image_id: image_id.to_string(),
                    strength,
                    seed,
                    aug: aug.clone(),
                    panel: MetricPanel::compute(&oracle.image, &disrupted.image, adapters)?,
                });
            }
        }
    }
    Ok(EvalReport { rows })
}

fn build_variants<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    clean: &ContextImage,
    immunized: &ContextImage,
    augmentations: &[&dyn Augmenter],
    seed: u64,
) -> Result<Vec<(String, ContextImage, ContextImage, u64)>> {
    let mut out = vec![("none".to_string(), clean.clone(), immunized.clone(), seed)];
    for (k, aug) in augmentations.iter().enumerate() {
        let s = rng::derive(seed, streams::AUGMENT, k as u64);
        let c = clean.with_pixels(backend, aug.apply(clean.pixels(), s)?)?;
        let i = immunized.with_pixels(backend, aug.apply(immunized.pixels(), s)?)?;
        out.push((aug.name(), c, i, seed));
    }
    Ok(out)
}

/// Boxed list of the codec-free augmentations at their default settings.
pub fn default_augmentations() -> Vec<Box<dyn Augmenter>> {
    vec![
        Box::new(Augmentation::NOISE),
        Box::new(Augmentation::JITTER),
        Box::new(Augmentation::ROTATE),
    ]
}
