//! Training loop for the toy backend on the masked latent-diffusion objective.

use alloc::vec::Vec;

use rand::Rng;

use super::params::BoundParams;
use super::toy::ToyBackend;
use super::{InpaintDenoiser, TraceInputs};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::masking::InpaintMask;
use crate::rng::{self, streams, DetRng};
use crate::tensor::Tensor;

/// Smallest corpus accepted by [`train_toy_backend`].
pub const MIN_CORPUS: usize = 256;

/// One corpus entry: pixels, its inpainting mask and caption token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub pixels: Tensor,
    pub mask: InpaintMask,
    pub caption: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of training a sample against the null (all-zero) prompt.
    pub null_prompt_prob: f64,
    /// Probability of replacing the corpus mask by a random rectangle.
    pub random_mask_prob: f64,
    pub clip_norm: f64,
    /// Number of fixed draws in the held-out loss probe.
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            null_prompt_prob: 0.1,
            random_mask_prob: 0.5,
            clip_norm: 1.0,
            probe_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss per step.
    pub step_losses: Vec<f64>,
    /// Loss probe before the first update.
    pub initial_probe_loss: f64,
    /// Loss probe after the last update.
    pub final_probe_loss: f64,
}

/// One diffusion-loss draw: which sample, timestep, noise and conditioning.
#[derive(Debug, Clone)]
struct Draw {
    sample: usize,
    t: usize,
    eps: Tensor,
    mask: Option<InpaintMask>,
    null_prompt: bool,
}

/// Trains `backend` in place and returns the loss log.
///
/// `on_step` sees `(step, minibatch loss)` after every update.
pub fn train_toy_backend(
    backend: &mut ToyBackend,
    corpus: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if corpus.len() < MIN_CORPUS {
        return Err(Error::validation(alloc::format!(
            "training corpus has {} samples, need at least {MIN_CORPUS}",
            corpus.len()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::validation("batch size and learning rate must be positive"));
    }
    let latents = corpus
        .iter()
        .map(|s| backend.encode_image(&s.pixels))
        .collect::<Result<Vec<_>>>()?;
    for s in corpus {
        if s.caption.iter().any(|&id| id >= backend.spec_ref().vocab_size) {
            return Err(Error::validation("caption token id outside the vocabulary"));
        }
    }

    let mut probe_rng = rng::seeded(rng::derive(cfg.seed, streams::TRAIN, u64::MAX));
    let probe: Vec<Draw> = (0..cfg.probe_size)
        .map(|_| draw(backend, corpus.len(), cfg, &mut probe_rng))
        .collect();
    let probe_loss = |b: &ToyBackend| -> Result<f64> {
        let mut total = 0.0;
        for d in &probe {
            let mut g = Graph::new();
            let p = b.params().bind(&mut g, false);
            total += draw_loss(b, &mut g, &p, corpus, &latents, d)?.1;
        }
        Ok(total / probe.len().max(1) as f64)
    };
    let initial_probe_loss = probe_loss(backend)?;

    let mut rng = rng::seeded(rng::derive(cfg.seed, streams::TRAIN, 0));
    let mut adam = Adam::new(backend.params().iter().map(|(_, t)| t.len()).collect());
    let mut step_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads: Vec<Vec<f64>> = backend.params().iter().map(|(_, t)| alloc::vec![0.0; t.len()]).collect();
        let mut loss_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let d = draw(backend, corpus.len(), cfg, &mut rng);
            let mut g = Graph::new();
            let p = backend.params().bind(&mut g, true);
            let (root, loss) = draw_loss(backend, &mut g, &p, corpus, &latents, &d)?;
            if !loss.is_finite() {
                return Err(Error::non_finite("training loss", step));
            }
            loss_sum += loss;
            let gr = g.backward(root)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(gv) = gr.get(v) {
                    for (a, &x) in acc.iter_mut().zip(gv) {
                        *a += x;
                    }
                }
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let mut norm_sq = 0.0;
        for gv in grads.iter_mut() {
            for x in gv.iter_mut() {
                *x *= inv_b;
                norm_sq += *x * *x;
            }
        }
        if !norm_sq.is_finite() {
            return Err(Error::non_finite("training gradient", step));
        }
        let norm = libm::sqrt(norm_sq);
        if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            let s = cfg.clip_norm / norm;
            grads.iter_mut().flatten().for_each(|x| *x *= s);
        }
        adam.step(backend.params_mut().tensors_mut(), &grads, cfg.learning_rate);
        let loss = loss_sum * inv_b;
        step_losses.push(loss);
        on_step(step, loss);
    }
    let final_probe_loss = if cfg.steps == 0 { initial_probe_loss } else { probe_loss(backend)? };
    Ok(TrainReport {
        step_losses,
        initial_probe_loss,
        final_probe_loss,
    })
}

fn draw(backend: &ToyBackend, corpus_len: usize, cfg: &TrainConfig, rng: &mut DetRng) -> Draw {
    let spec = backend.spec_ref();
    let sample = rng.random_range(0..corpus_len);
    let t = rng.random_range(1..=spec.max_timestep);
    let eps = rng::normal_tensor(rng, &spec.latent_shape);
    let mask = if rng.random::<f64>() < cfg.random_mask_prob {
        let [_, ph, pw] = spec.pixel_shape;
        let f = spec.downsample_factor();
        let y0 = rng.random_range(0..ph / 2);
        let x0 = rng.random_range(0..pw / 2);
        let y1 = rng.random_range(y0 + f..=ph);
        let x1 = rng.random_range(x0 + f..=pw);
        InpaintMask::rectangle(ph, pw, f, [y0, y1, x0, x1], false).ok()
    } else {
        None
    };
    let null_prompt = rng.random::<f64>() < cfg.null_prompt_prob;
    Draw {
        sample,
        t,
        eps,
        mask,
        null_prompt,
    }
}

fn draw_loss(
    backend: &ToyBackend,
    g: &mut Graph,
    p: &BoundParams,
    corpus: &[TrainingSample],
    latents: &[Tensor],
    d: &Draw,
) -> Result<(crate::autodiff::Var, f64)> {
    let s = &corpus[d.sample];
    let spec = backend.spec_ref();
    let z0 = &latents[d.sample];
    let zt = backend.schedule().add_noise(z0, d.t, &d.eps)?;
    let tokens = caption_embeddings(backend, &s.caption, d.null_prompt);
    let tokens = g.constant(tokens);
    let tau = backend.trace_encode_text_with(g, p, tokens)?;
    let z = g.constant(zt);
    let ctx = g.constant(z0.clone());
    let mask = d.mask.as_ref().unwrap_or(&s.mask);
    let out = backend.trace_forward_with(
        g,
        p,
        TraceInputs {
            z_t: z,
            t: d.t,
            context_latent: ctx,
            mask,
            tau,
        },
    )?;
    let target = g.constant(d.eps.clone());
    let diff = g.sub(out.eps_pred, target)?;
    let sq = g.sum_squares(diff);
    let n = spec.latent_shape.iter().product::<usize>() as f64;
    let root = g.scale(sq, 1.0 / n);
    let loss = g.value(root).data()[0];
    Ok((root, loss))
}

/// Vocabulary rows for `caption`, or zeros for the null prompt.
pub fn caption_embeddings(backend: &ToyBackend, caption: &[usize], null_prompt: bool) -> Tensor {
    let e = backend.spec_ref().embed_dim;
    let n = caption.len().clamp(1, backend.spec_ref().max_tokens);
    if null_prompt || caption.is_empty() {
        return Tensor::zeros(&[n, e]);
    }
    let vocab = backend.vocabulary().data();
    Tensor::from_fn(&[n, e], |i| vocab[caption[i / e] * e + i % e])
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(sizes: Vec<usize>) -> Self {
        Self {
            m: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(Self::B1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::B2, self.t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = Self::B1 * *mi + (1.0 - Self::B1) * gi;
                *vi = Self::B2 * *vi + (1.0 - Self::B2) * gi * gi;
                *w -= lr * (*mi / c1) / (libm::sqrt(*vi / c2) + Self::EPS);
            }
        }
    }
}
