//! Token-projective textual inversion.
//!
//! Token embeddings `pi` are fitted so that the text embedding `E(Proj(pi))`
//! explains the context image under the masked diffusion loss. The loss and
//! its gradient are always taken at the projected point, and the step is
//! applied to the continuous `pi`. Snapping to the nearest vocabulary rows
//! keeps the prompt on the learned token manifold.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::Graph;
use crate::backend::{InpaintDenoiser, TraceInputs};
use crate::error::{Error, Result};
use crate::masking::{ContextImage, InpaintMask};
use crate::rng::{self, streams};
use crate::tensor::Tensor;
use crate::timestep::{sample_timestep, TimestepDistribution};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPrompt {
    /// `[num_tokens, embed_dim]`.
    pub pi: Tensor,
    /// Nearest vocabulary id per row, when known.
    pub vocab_ids: Option<Vec<usize>>,
}

impl TokenPrompt {
    pub fn new(pi: Tensor) -> Result<Self> {
        match *pi.shape() {
            [n, e] if n > 0 && e > 0 => Ok(Self { pi, vocab_ids: None }),
            ref s => Err(Error::contract(alloc::format!("token prompt must be [tokens, dim], got {s:?}"))),
        }
    }

    /// Rows copied from the vocabulary.
    pub fn from_ids(vocab: &Tensor, ids: &[usize]) -> Result<Self> {
        let (v, e) = vocab_dims(vocab)?;
        if ids.is_empty() {
            return Err(Error::validation("empty token id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfRange {
                what: "token id",
                value: bad as i64,
                min: 0,
                max: v as i64 - 1,
            });
        }
        let data = vocab.data();
        let pi = Tensor::from_fn(&[ids.len(), e], |k| data[ids[k / e] * e + k % e]);
        Ok(Self {
            pi,
            vocab_ids: Some(ids.to_vec()),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.pi.shape()[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMetric {
    Cosine,
    Euclidean,
}

/// How the inversion picks the noise level of each draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseLevel {
    /// `t` from the attack's timestep distribution.
    Sampled,
    /// Always the terminal timestep `T`.
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    pub num_tokens: usize,
    pub steps: usize,
    pub step_size: f64,
    pub timestep_dist: TimestepDistribution,
    pub seed: u64,
    pub metric: ProjectionMetric,
    pub noise_level: NoiseLevel,
    /// `false` runs the unprojected ablation: loss at `E(pi)`, continuous output.
    pub project: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            num_tokens: 8,
            steps: 200,
            step_size: 1e-3,
            timestep_dist: TimestepDistribution::default(),
            seed: 0,
            metric: ProjectionMetric::Cosine,
            noise_level: NoiseLevel::Sampled,
            project: true,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::validation("inversion needs at least one step"));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(Error::validation(alloc::format!("invalid inversion step size {}", self.step_size)));
        }
        if self.num_tokens < 1 {
            return Err(Error::validation("inversion needs at least one token"));
        }
        self.timestep_dist.validate()
    }
}

fn vocab_dims(vocab: &Tensor) -> Result<(usize, usize)> {
    match *vocab.shape() {
        [v, e] if v > 0 && e > 0 => Ok((v, e)),
        [0, _] => Err(Error::contract("empty vocabulary")),
        ref s => Err(Error::contract(alloc::format!("vocabulary must be [tokens, dim], got {s:?}"))),
    }
}

/// Replaces each row by its nearest vocabulary row. Ties go to the lowest id.
pub fn project_tokens(prompt: &TokenPrompt, vocab: &Tensor, metric: ProjectionMetric) -> Result<TokenPrompt> {
    let (v, e) = vocab_dims(vocab)?;
    let [_, pe] = *prompt.pi.shape() else {
        return Err(Error::contract("token prompt must be 2-d"));
    };
    if pe != e {
        return Err(Error::contract(alloc::format!("prompt dim {pe} != vocabulary dim {e}")));
    }
    let table = vocab.data();
    let norms: Vec<f64> = table.chunks_exact(e).map(|r| libm::sqrt(dot(r, r))).collect();
    let ids: Vec<usize> = prompt
        .pi
        .data()
        .chunks_exact(e)
        .map(|row| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (id, cand) in table.chunks_exact(e).enumerate() {
                let score = match metric {
                    ProjectionMetric::Cosine => {
                        // The row norm is shared by every candidate.
                        if norms[id] == 0.0 {
                            0.0
                        } else {
                            dot(row, cand) / norms[id]
                        }
                    }
                    ProjectionMetric::Euclidean => -row.iter().zip(cand).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                };
                if score > best_score {
                    best_score = score;
                    best = id;
                }
            }
            best
        })
        .collect();
    debug_assert!(ids.iter().all(|&i| i < v));
    TokenPrompt::from_ids(vocab, &ids)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum(((eps - eps_hat) * M)^2)` with the mask broadcast over latent channels.
pub fn inversion_loss<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    pi: &Tensor,
    context: &ContextImage,
    mask: &InpaintMask,
    z_t: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<f64> {
    Ok(traced_loss(backend, pi, context, mask, z_t, t, eps, false)?.0)
}

/// Loss and its gradient with respect to `pi`.
pub fn inversion_loss_grad<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    pi: &Tensor,
    context: &ContextImage,
    mask: &InpaintMask,
    z_t: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<(f64, Tensor)> {
    let (loss, grad) = traced_loss(backend, pi, context, mask, z_t, t, eps, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

#[allow(clippy::too_many_arguments)]
fn traced_loss<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    pi: &Tensor,
    context: &ContextImage,
    mask: &InpaintMask,
    z_t: &Tensor,
    t: usize,
    eps: &Tensor,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let spec = backend.spec();
    eps.expect_shape(&spec.latent_shape, "eps")?;
    let mut g = Graph::new();
    let p = if want_grad { g.variable(pi.clone()) } else { g.constant(pi.clone()) };
    let tau = backend.trace_encode_text(&mut g, p)?;
    let z = g.constant(z_t.clone());
    let ctx = g.constant(context.latent().clone());
    let out = backend.trace_forward(
        &mut g,
        TraceInputs {
            z_t: z,
            t,
            context_latent: ctx,
            mask,
            tau,
        },
    )?;
    let m = g.constant(mask.latent_broadcast(spec.latent_shape[0]));
    let target = g.constant(eps.clone());
    let diff = g.sub(target, out.eps_pred)?;
    let masked = g.mul(diff, m)?;
    let root = g.sum_squares(masked);
    let loss = g.value(root).data()[0];
    if !want_grad {
        return Ok((loss, None));
    }
    let grads = g.backward(root)?;
    Ok((loss, Some(grads.wrt(p))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    /// Projected `pi*` (continuous in the unprojected ablation).
    pub prompt: TokenPrompt,
    /// `E(pi*)`.
    pub tau: Tensor,
    /// Loss at every step, evaluated where the gradient was taken.
    pub losses: Vec<f64>,
    /// Nearest-vocabulary ids of the point the loss was evaluated at, per step.
    pub trajectory_ids: Vec<Vec<usize>>,
}

/// One step's record, passed to the observer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionStep {
    pub step: usize,
    pub t: usize,
    pub loss: f64,
}

/// Runs `cfg.steps` projected descent steps from seeded random vocabulary ids.
pub fn invert<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    context: &ContextImage,
    mask: &InpaintMask,
    cfg: &InversionConfig,
    mut on_step: impl FnMut(&InversionStep),
) -> Result<InversionResult> {
    cfg.validate()?;
    let spec = backend.spec();
    cfg.timestep_dist.validate_for(spec.max_timestep)?;
    if cfg.num_tokens > spec.max_tokens {
        return Err(Error::OutOfRange {
            what: "num_tokens",
            value: cfg.num_tokens as i64,
            min: 1,
            max: spec.max_tokens as i64,
        });
    }
    let vocab = backend.vocabulary();
    let mut init_rng = rng::seeded(rng::derive(cfg.seed, streams::INVERSION, 0));
    let ids: Vec<usize> = (0..cfg.num_tokens)
        .map(|_| init_rng.random_range(0..spec.vocab_size))
        .collect();
    let mut pi = TokenPrompt::from_ids(vocab, &ids)?.pi;
    let z0 = context.latent();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut trajectory_ids = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::seeded(rng::derive(cfg.seed, streams::INVERSION, step as u64 + 1));
        let t = match cfg.noise_level {
            NoiseLevel::Sampled => sample_timestep(&cfg.timestep_dist, &mut r),
            NoiseLevel::Terminal => spec.max_timestep,
        };
        let eps = rng::normal_tensor(&mut r, &spec.latent_shape);
        let z_t = backend.schedule().add_noise(z0, t, &eps)?;
        let projected = project_tokens(&TokenPrompt::new(pi.clone())?, vocab, cfg.metric)?;
        let eval_at = if cfg.project { &projected.pi } else { &pi };
        let (loss, grad) = inversion_loss_grad(backend, eval_at, context, mask, &z_t, t, &eps)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite {
                what: "inversion gradient",
                step,
                detail: alloc::format!(" (t {t})"),
            });
        }
        losses.push(loss);
        trajectory_ids.push(projected.vocab_ids.clone().unwrap_or_default());
        on_step(&InversionStep { step, t, loss });
        for (p, g) in pi.data_mut().iter_mut().zip(grad.data()) {
            *p -= cfg.step_size * g;
        }
    }
    let prompt = if cfg.project {
        project_tokens(&TokenPrompt::new(pi)?, vocab, cfg.metric)?
    } else {
        TokenPrompt::new(pi)?
    };
    let tau = backend.encode_text(&prompt.pi)?;
    Ok(InversionResult {
        prompt,
        tau,
        losses,
        trajectory_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyBackend, ToyConfig};
    use alloc::vec;

    fn tiny() -> ToyBackend {
        ToyBackend::new(ToyConfig::tiny()).unwrap()
    }

    /// Brute-force nearest neighbour with explicit normalisation of both sides.
    fn brute_force(row: &[f64], vocab: &Tensor) -> usize {
        let e = row.len();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in vocab.data().chunks(e).enumerate() {
            let s = row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (norm(row) * norm(c));
            if s > best.1 {
                best = (i, s);
            }
        }
        best.0
    }

    #[test]
    fn projection_matches_exhaustive_scan_and_is_idempotent() {
        let b = tiny();
        let vocab = b.vocabulary();
        assert_eq!(vocab.shape()[0], 32);
        let mut r = rng::seeded(11);
        for _ in 0..20 {
            let pi = rng::normal_tensor(&mut r, &[6, vocab.shape()[1]]);
            let p = project_tokens(&TokenPrompt::new(pi.clone()).unwrap(), vocab, ProjectionMetric::Cosine).unwrap();
            let ids = p.vocab_ids.clone().unwrap();
            for (k, row) in pi.data().chunks(vocab.shape()[1]).enumerate() {
                assert_eq!(ids[k], brute_force(row, vocab));
            }
            let again = project_tokens(&p, vocab, ProjectionMetric::Cosine).unwrap();
            assert_eq!(again.pi, p.pi);
        }
    }

    #[test]
    fn projection_errors() {
        let empty = Tensor::zeros(&[0, 4]);
        let p = TokenPrompt::new(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(project_tokens(&p, &empty, ProjectionMetric::Cosine), Err(Error::Contract(_))));
        let v = Tensor::zeros(&[3, 5]);
        assert!(matches!(project_tokens(&p, &v, ProjectionMetric::Euclidean), Err(Error::Contract(_))));
    }

    #[test]
    fn euclidean_projection_picks_closest_row() {
        let v = Tensor::new(&[3, 2], vec![1.0, 0.0, 10.0, 0.0, 0.0, 1.0]).unwrap();
        let p = TokenPrompt::new(Tensor::new(&[1, 2], vec![2.0, 0.1]).unwrap()).unwrap();
        let e = project_tokens(&p, &v, ProjectionMetric::Euclidean).unwrap();
        assert_eq!(e.vocab_ids, Some(vec![0]));
        // cosine ties between rows 0 and 1 resolve to the lower id
        let c = project_tokens(&p, &v, ProjectionMetric::Cosine).unwrap();
        assert_eq!(c.vocab_ids, Some(vec![0]));
    }

    #[test]
    fn zero_mask_gives_zero_loss() {
        let b = tiny();
        let ctx = ContextImage::new(&b, Tensor::full(&[3, 8, 8], 0.4), "x").unwrap();
        let m = InpaintMask::full(8, 8, 2, 0.0).unwrap();
        let mut r = rng::seeded(1);
        let z = rng::normal_tensor(&mut r, &b.spec().latent_shape);
        let eps = rng::normal_tensor(&mut r, &b.spec().latent_shape);
        let pi = TokenPrompt::from_ids(b.vocabulary(), &[1, 2]).unwrap().pi;
        assert_eq!(inversion_loss(&b, &pi, &ctx, &m, &z, 500, &eps).unwrap(), 0.0);
    }

    #[test]
    fn zero_step_size_returns_projected_init() {
        let b = tiny();
        let ctx = ContextImage::new(&b, Tensor::full(&[3, 8, 8], 0.4), "x").unwrap();
        let m = InpaintMask::rectangle(8, 8, 2, [0, 4, 0, 8], true).unwrap();
        let cfg = InversionConfig {
            num_tokens: 4,
            steps: 1,
            step_size: 0.0,
            ..InversionConfig::default()
        };
        let out = invert(&b, &ctx, &m, &cfg, |_| {}).unwrap();
        assert_eq!(out.losses.len(), 1);
        assert_eq!(out.trajectory_ids[0], out.prompt.vocab_ids.clone().unwrap());
        let again = invert(&b, &ctx, &m, &cfg, |_| {}).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rejects_invalid_configs() {
        let b = tiny();
        let ctx = ContextImage::new(&b, Tensor::full(&[3, 8, 8], 0.4), "x").unwrap();
        let m = InpaintMask::full(8, 8, 2, 1.0).unwrap();
        for cfg in [
            InversionConfig { steps: 0, ..Default::default() },
            InversionConfig { step_size: -1.0, ..Default::default() },
            InversionConfig { num_tokens: 99, ..Default::default() },
        ] {
            assert!(invert(&b, &ctx, &m, &cfg, |_| {}).is_err());
        }
    }
}
