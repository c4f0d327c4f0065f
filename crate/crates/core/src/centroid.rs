//! Monte Carlo estimate of the semantic centroid of a context image.
//!
//! The centroid is the expected hidden-state bundle over noise latents and
//! timesteps drawn from the attack distribution. It is estimated once on the
//! clean context and then frozen: the attack pushes the perturbed image's
//! hidden states away from it.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::backend::{HiddenStateBundle, InpaintDenoiser};
use crate::error::{Error, Result};
use crate::masking::{ContextImage, InpaintMask};
use crate::rng::{self, streams};
use crate::tensor::{Fnv, Tensor};
use crate::timestep::{sample_timestep, TimestepDistribution};

pub const DEFAULT_SAMPLES: usize = 32;

/// One `(z_T, t)` Monte Carlo draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub seed: u64,
    pub z_t: Tensor,
    pub t: usize,
}

impl NoiseDraw {
    /// Draw `index` of `stream` under `root`: noise first, then the timestep,
    /// both from the same derived generator.
    pub fn derive(
        latent_shape: &[usize],
        dist: &TimestepDistribution,
        root: u64,
        stream: u64,
        index: u64,
    ) -> Self {
        let seed = rng::derive(root, stream, index);
        let mut r = rng::seeded(seed);
        let z_t = rng::normal_tensor(&mut r, latent_shape);
        let t = sample_timestep(dist, &mut r);
        Self { seed, z_t, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidConfig {
    pub samples: usize,
    pub seed: u64,
    pub dist: TimestepDistribution,
    /// Reuse draw 0 for every sample. Only useful to test the reducer.
    pub identical_draws: bool,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            seed: 0,
            dist: TimestepDistribution::default(),
            identical_draws: false,
        }
    }
}

/// Per-layer mean hidden state with its per-element sample variance.
/// Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCentroid {
    layers: Vec<CentroidLayer>,
    sample_count: usize,
    context_hash: u64,
    config_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidLayer {
    pub id: String,
    pub mean: Tensor,
    pub variance: Tensor,
}

impl SemanticCentroid {
    pub fn layers(&self) -> &[CentroidLayer] {
        &self.layers
    }

    pub fn layer(&self, id: &str) -> Option<&CentroidLayer> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    /// Fingerprint of the clean context, mask and text embedding the centroid
    /// was estimated on.
    pub fn context_hash(&self) -> u64 {
        self.context_hash
    }

    /// Context hash combined with the estimator settings.
    pub fn config_hash(&self) -> u64 {
        self.config_hash
    }

    /// `sqrt(mean variance / n)` per layer.
    pub fn standard_errors(&self) -> Vec<f64> {
        let n = self.sample_count.max(1) as f64;
        self.layers
            .iter()
            .map(|l| libm::sqrt(l.variance.mean() / n))
            .collect()
    }

    /// Reassembles a centroid from stored parts, as loaded from disk.
    pub fn from_parts(layers: Vec<CentroidLayer>, sample_count: usize, context_hash: u64, config_hash: u64) -> Result<Self> {
        if layers.is_empty() || sample_count == 0 {
            return Err(Error::validation("centroid needs at least one layer and one sample"));
        }
        if layers.iter().any(|l| l.mean.shape() != l.variance.shape()) {
            return Err(Error::contract("centroid mean and variance shapes differ"));
        }
        Ok(Self {
            layers,
            sample_count,
            context_hash,
            config_hash,
        })
    }

    /// Mean of two centroids weighted by their sample counts. Variances are
    /// dropped (set to zero); the result is for comparison only.
    pub fn pooled_mean(a: &Self, b: &Self) -> Result<Self> {
        let (na, nb) = (a.sample_count as f64, b.sample_count as f64);
        let layers = a
            .layers
            .iter()
            .zip(&b.layers)
            .map(|(la, lb)| {
                let mean = la.mean.zip_map(&lb.mean, |x, y| (na * x + nb * y) / (na + nb))?;
                Ok(CentroidLayer {
                    id: la.id.clone(),
                    variance: Tensor::zeros(mean.shape()),
                    mean,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(layers, a.sample_count + b.sample_count, a.context_hash, 0)
    }
}

/// Fingerprint of clean conditioning, for freezing checks.
pub fn context_fingerprint(context: &ContextImage, mask: &InpaintMask, tau: &Tensor) -> u64 {
    crate::tensor::fingerprint([context.latent(), mask.grid(), tau])
}

fn config_fingerprint(context_hash: u64, cfg: &CentroidConfig) -> u64 {
    let mut h = Fnv::new();
    h.write_u64(context_hash);
    h.write_u64(cfg.samples as u64);
    h.write_u64(cfg.seed);
    h.write_u64(cfg.dist.mean.to_bits());
    h.write_u64(cfg.dist.std.to_bits());
    h.write_u64(cfg.dist.clamp_range.0 as u64);
    h.write_u64(cfg.dist.clamp_range.1 as u64);
    h.write_u64(cfg.identical_draws as u64);
    h.finish()
}

/// Averages hidden states over `cfg.samples` draws. Sample `i` uses the seed
/// `derive(cfg.seed, CENTROID, i)` and the reduction runs in index order, so
/// the result does not depend on anything but the inputs.
pub fn estimate_centroid<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    context: &ContextImage,
    mask: &InpaintMask,
    tau: &Tensor,
    cfg: &CentroidConfig,
) -> Result<SemanticCentroid> {
    if cfg.samples == 0 {
        return Err(Error::validation("centroid needs at least one sample"));
    }
    cfg.dist.validate_for(backend.spec().max_timestep)?;
    let shape = backend.spec().latent_shape;
    let mut acc: Option<Welford> = None;
    for i in 0..cfg.samples {
        let index = if cfg.identical_draws { 0 } else { i as u64 };
        let d = NoiseDraw::derive(&shape, &cfg.dist, cfg.seed, streams::CENTROID, index);
        let bundle = backend.forward(&d.z_t, d.t, context, mask, tau)?.hidden;
        if !bundle.all_finite() {
            return Err(Error::NonFinite {
                what: "centroid hidden state",
                step: i,
                detail: alloc::format!(" (draw seed {:#x}, t {})", d.seed, d.t),
            });
        }
        match acc.as_mut() {
            None => acc = Some(Welford::new(&bundle)),
            Some(w) => w.push(&bundle)?,
        }
    }
    let context_hash = context_fingerprint(context, mask, tau);
    let centroid = acc.expect("samples > 0").finish(context_hash, config_fingerprint(context_hash, cfg));
    Ok(centroid)
}

/// Reduces precomputed bundles, in order.
pub fn centroid_from_bundles(bundles: &[HiddenStateBundle], context_hash: u64) -> Result<SemanticCentroid> {
    let (first, rest) = bundles
        .split_first()
        .ok_or_else(|| Error::validation("no bundles to reduce"))?;
    let mut w = Welford::new(first);
    for b in rest {
        w.push(b)?;
    }
    Ok(w.finish(context_hash, 0))
}

struct Welford {
    ids: Vec<String>,
    mean: Vec<Vec<f64>>,
    m2: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    n: usize,
}

impl Welford {
    fn new(b: &HiddenStateBundle) -> Self {
        Self {
            ids: b.entries.iter().map(|(id, _)| id.clone()).collect(),
            mean: b.entries.iter().map(|(_, t)| t.data().to_vec()).collect(),
            m2: b.entries.iter().map(|(_, t)| alloc::vec![0.0; t.len()]).collect(),
            shapes: b.entries.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            n: 1,
        }
    }

    fn push(&mut self, b: &HiddenStateBundle) -> Result<()> {
        if b.entries.len() != self.ids.len()
            || b.entries.iter().zip(&self.ids).zip(&self.mean).any(|(((id, t), i), m)| id != i || t.len() != m.len())
        {
            return Err(Error::contract("hidden-state layouts differ across draws"));
        }
        self.n += 1;
        let n = self.n as f64;
        for (((_, t), mean), m2) in b.entries.iter().zip(&mut self.mean).zip(&mut self.m2) {
            for ((&x, m), s) in t.data().iter().zip(mean.iter_mut()).zip(m2.iter_mut()) {
                let d = x - *m;
                *m += d / n;
                *s += d * (x - *m);
            }
        }
        Ok(())
    }

    fn finish(self, context_hash: u64, config_hash: u64) -> SemanticCentroid {
        let denom = (self.n.max(2) - 1) as f64;
        let layers = self
            .ids
            .into_iter()
            .zip(self.mean)
            .zip(self.m2)
            .zip(self.shapes)
            .map(|(((id, mean), m2), shape)| CentroidLayer {
                id,
                mean: Tensor::new(&shape, mean).expect("shape from bundle"),
                variance: Tensor::new(&shape, m2.into_iter().map(|s| s / denom).collect()).expect("shape from bundle"),
            })
            .collect();
        SemanticCentroid {
            layers,
            sample_count: self.n,
            context_hash,
            config_hash,
        }
    }
}

/// Per-layer weights for the distance, aligned with the centroid's layers.
/// A zero weight drops a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights(pub Vec<f64>);

impl LayerWeights {
    pub fn uniform(layers: usize) -> Self {
        Self(alloc::vec![1.0; layers])
    }

    /// Weight 1 for listed ids, 0 for the rest.
    pub fn select(centroid: &SemanticCentroid, ids: &[&str]) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|id| centroid.layer(id).is_none()) {
            return Err(Error::validation(alloc::format!("unknown attention layer {bad:?}")));
        }
        Ok(Self(
            centroid
                .layers
                .iter()
                .map(|l| if ids.contains(&l.id.as_str()) { 1.0 } else { 0.0 })
                .collect(),
        ))
    }

    fn check(&self, layers: usize) -> Result<()> {
        if self.0.len() != layers {
            return Err(Error::contract(alloc::format!(
                "{} layer weights for {} layers",
                self.0.len(),
                layers
            )));
        }
        Ok(())
    }
}

/// `sum_l w_l * ||centroid_l - h_l||^2`.
pub fn centroid_distance(centroid: &SemanticCentroid, bundle: &HiddenStateBundle, weights: &LayerWeights) -> Result<f64> {
    weights.check(centroid.layers.len())?;
    let mut total = 0.0;
    for ((layer, w), (id, h)) in centroid.layers.iter().zip(&weights.0).zip(&bundle.entries) {
        if *id != layer.id || h.len() != layer.mean.len() {
            return Err(Error::contract(alloc::format!("bundle layer {id} does not match centroid layer {}", layer.id)));
        }
        if *w != 0.0 {
            total += w * layer.mean.data().iter().zip(h.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    Ok(total)
}

/// Graph version of [`centroid_distance`]; the centroid is a constant.
pub fn trace_centroid_distance(g: &mut Graph, centroid: &SemanticCentroid, hidden: &[Var], weights: &LayerWeights) -> Result<Var> {
    weights.check(centroid.layers.len())?;
    if hidden.len() != centroid.layers.len() {
        return Err(Error::contract("hidden-state count does not match centroid"));
    }
    let mut total: Option<Var> = None;
    for ((layer, &w), &h) in centroid.layers.iter().zip(&weights.0).zip(hidden) {
        if w == 0.0 {
            continue;
        }
        let target = g.constant(layer.mean.clone().reshape(g.shape(h))?);
        let diff = g.sub(h, target)?;
        let sq = g.sum_squares(diff);
        let term = g.scale(sq, w);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    total.ok_or_else(|| Error::validation("every layer weight is zero"))
}
