//! Digression attack: PGD on context pixels that maximizes the distance
//! between the denoiser's hidden states and a frozen semantic centroid.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::backend::{InpaintDenoiser, TraceInputs};
use crate::centroid::{
    context_fingerprint, estimate_centroid, trace_centroid_distance, CentroidConfig, LayerWeights, NoiseDraw,
    SemanticCentroid,
};
use crate::error::{Error, Result};
use crate::masking::{ContextImage, InpaintMask, Perturbation, BUDGET_SLACK};
use crate::rng::{self, streams};
use crate::tensor::{Fnv, Tensor};
use crate::timestep::TimestepDistribution;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    LInf,
    L2,
}

impl Norm {
    pub fn measure(&self, t: &Tensor) -> f64 {
        match self {
            Norm::LInf => t.max_abs(),
            Norm::L2 => libm::sqrt(t.sum_sq()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Norm::LInf => "linf",
            Norm::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linf" => Some(Norm::LInf),
            "l2" => Some(Norm::L2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackBudget {
    /// Pixel units on the `[0, 1]` scale.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// `(z_T, t)` draws averaged per step.
    pub grad_avg: usize,
    pub seed: u64,
    pub norm: Norm,
}

impl Default for AttackBudget {
    /// `eps = 12/255`, step `3/255`, 250 iterations, 7 draws per step.
    fn default() -> Self {
        Self {
            epsilon: 12.0 / 255.0,
            step_size: 3.0 / 255.0,
            iterations: 250,
            grad_avg: 7,
            seed: 0,
            norm: Norm::LInf,
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || self.step_size > self.epsilon {
            return Err(Error::validation(format!(
                "step size must lie in (0, epsilon], got {} with epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        if self.iterations < 1 || self.grad_avg < 1 {
            return Err(Error::validation("iterations and grad_avg must be at least 1"));
        }
        Ok(())
    }
}

/// Source of wall-clock readings; the core crate has no clock of its own.
pub trait Stopwatch {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

/// Always reads zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Stopwatch for NoClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    /// Digression loss at `delta_k`, for `k = 0..iterations`, then at the final delta.
    pub losses: Vec<f64>,
    /// Norm of `delta_k` under the budget's norm, same indexing as `losses`.
    pub norms: Vec<f64>,
    /// Seconds spent in each iteration.
    pub seconds: Vec<f64>,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub best_delta: Tensor,
}

impl AttackTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("trace has at least one entry")
    }
}

/// Draws for PGD iteration `iteration`: indices `iteration * grad_avg + k`.
pub fn attack_draws(
    latent_shape: &[usize],
    dist: &TimestepDistribution,
    seed: u64,
    iteration: usize,
    grad_avg: usize,
) -> Vec<NoiseDraw> {
    (0..grad_avg)
        .map(|k| NoiseDraw::derive(latent_shape, dist, seed, streams::ATTACK, (iteration * grad_avg + k) as u64))
        .collect()
}

/// What the attack conditions on besides the pixels.
#[derive(Debug, Clone, Copy)]
pub struct AttackTarget<'a> {
    pub mask: &'a InpaintMask,
    pub tau: &'a Tensor,
    pub centroid: &'a SemanticCentroid,
    pub weights: &'a LayerWeights,
}

/// Mean digression loss over `draws` at `pixels`, and its gradient with
/// respect to the pixels. One graph per draw; per-draw gradients are summed
/// in draw order and divided by the draw count.
pub fn digression_step<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    pixels: &Tensor,
    target: &AttackTarget<'_>,
    draws: &[NoiseDraw],
) -> Result<(Tensor, f64)> {
    if draws.is_empty() {
        return Err(Error::validation("digression step needs at least one draw"));
    }
    pixels.expect_shape(&backend.spec().pixel_shape, "pixels")?;
    let mut grad = Tensor::zeros(pixels.shape());
    let mut loss = 0.0;
    for d in draws {
        let (l, gr) = draw_loss_grad(backend, pixels, target, d)?;
        if !l.is_finite() || !gr.all_finite() {
            return Err(Error::NonFinite {
                what: "digression gradient",
                step: 0,
                detail: format!(" (draw seed {:#x}, t {})", d.seed, d.t),
            });
        }
        loss += l;
        for (a, b) in grad.data_mut().iter_mut().zip(gr.data()) {
            *a += b;
        }
    }
    let inv = 1.0 / draws.len() as f64;
    Ok((grad.scale(inv), loss * inv))
}

fn draw_loss_grad<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    pixels: &Tensor,
    target: &AttackTarget<'_>,
    d: &NoiseDraw,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let x = g.variable(pixels.clone());
    let latent = backend.trace_encode_image(&mut g, x)?;
    let z = g.constant(d.z_t.clone());
    let tau = g.constant(target.tau.clone());
    let out = backend.trace_forward(
        &mut g,
        TraceInputs {
            z_t: z,
            t: d.t,
            context_latent: latent,
            mask: target.mask,
            tau,
        },
    )?;
    let root = trace_centroid_distance(&mut g, target.centroid, &out.hidden, target.weights)?;
    let loss = g.value(root).data()[0];
    let grads = g.backward(root)?;
    Ok((loss, grads.wrt(x)))
}

/// Mean digression loss without gradients.
pub fn digression_loss<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    pixels: &Tensor,
    target: &AttackTarget<'_>,
    draws: &[NoiseDraw],
) -> Result<f64> {
    let ctx = ContextImage::new(backend, pixels.clone(), "")?;
    let mut total = 0.0;
    for d in draws {
        let h = backend.forward(&d.z_t, d.t, &ctx, target.mask, target.tau)?.hidden;
        total += crate::centroid::centroid_distance(target.centroid, &h, target.weights)?;
    }
    Ok(total / draws.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PgdOptions {
    /// Re-estimate the centroid on the current perturbed image before every
    /// step. Ablation only; the default keeps it frozen at the clean context.
    pub live_centroid: Option<CentroidConfig>,
}

/// Projected gradient ascent on the digression loss.
///
/// `delta_{k+1} = clip_eps(delta_k + step * sign(g_k))`, then the perturbed
/// pixels are clamped to `[0, 1]`. The L2 variant steps along `g / |g|` and
/// projects onto the L2 ball. The trace ends with the loss at the final delta,
/// measured on a fresh set of draws.
///
/// `on_iter` sees the iteration, its loss and the perturbed pixels after the step.
#[allow(clippy::too_many_arguments)]
pub fn pgd_ascend<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    context: &ContextImage,
    target: &AttackTarget<'_>,
    dist: &TimestepDistribution,
    budget: &AttackBudget,
    options: &PgdOptions,
    clock: &dyn Stopwatch,
    mut on_iter: impl FnMut(usize, f64, &Tensor),
) -> Result<(Perturbation, AttackTrace)> {
    budget.validate()?;
    dist.validate_for(backend.spec().max_timestep)?;
    let expected = context_fingerprint(context, target.mask, target.tau);
    if target.centroid.context_hash() != expected {
        return Err(Error::validation(
            "centroid was not estimated on this context, mask and text embedding",
        ));
    }
    let shape = backend.spec().latent_shape;
    let x = context.pixels();
    let mut adv = x.clone();
    let mut trace = AttackTrace {
        losses: Vec::with_capacity(budget.iterations + 1),
        norms: Vec::with_capacity(budget.iterations + 1),
        seconds: Vec::with_capacity(budget.iterations),
        best_iteration: 0,
        best_loss: f64::NEG_INFINITY,
        best_delta: Tensor::zeros(x.shape()),
    };
    let mut live: Option<SemanticCentroid> = None;
    for k in 0..budget.iterations {
        let start = clock.now();
        if let Some(cfg) = &options.live_centroid {
            let ctx = context.with_pixels(backend, adv.clone())?;
            live = Some(estimate_centroid(backend, &ctx, target.mask, target.tau, cfg)?);
        }
        let step_target = AttackTarget {
            centroid: live.as_ref().unwrap_or(target.centroid),
            ..*target
        };
        let draws = attack_draws(&shape, dist, budget.seed, k, budget.grad_avg);
        let (grad, loss) = digression_step(backend, &adv, &step_target, &draws).map_err(|e| match e {
            Error::NonFinite { what, detail, .. } => Error::NonFinite { what, step: k, detail },
            e => e,
        })?;
        record(&mut trace, k, loss, x, &adv, budget);
        update(&mut adv, &grad, x, budget);
        check_iterate(x, &adv, budget, k + 1)?;
        trace.seconds.push(clock.now() - start);
        on_iter(k, loss, &adv);
    }
    let final_draws = attack_draws(&shape, dist, budget.seed, budget.iterations, budget.grad_avg);
    let final_loss = digression_loss(backend, &adv, target, &final_draws)?;
    if !final_loss.is_finite() {
        return Err(Error::non_finite("digression loss", budget.iterations));
    }
    record(&mut trace, budget.iterations, final_loss, x, &adv, budget);
    let p = Perturbation {
        delta: difference(&adv, x),
        budget: *budget,
    };
    p.check_budget()?;
    Ok((p, trace))
}

fn record(trace: &mut AttackTrace, k: usize, loss: f64, x: &Tensor, adv: &Tensor, budget: &AttackBudget) {
    let delta = difference(adv, x);
    trace.losses.push(loss);
    trace.norms.push(budget.norm.measure(&delta));
    if loss > trace.best_loss {
        trace.best_loss = loss;
        trace.best_iteration = k;
        trace.best_delta = delta;
    }
}

fn difference(adv: &Tensor, x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| adv.data()[i] - x.data()[i])
}

/// One ascent step on the perturbed pixels `adv`, followed by projection onto
/// the ball around `x` and clamping to `[0, 1]`.
fn update(adv: &mut Tensor, grad: &Tensor, x: &Tensor, budget: &AttackBudget) {
    let eps = budget.epsilon;
    let mut delta = difference(adv, x);
    match budget.norm {
        Norm::LInf => {
            for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
                *d = (*d + budget.step_size * sign(g)).clamp(-eps, eps);
            }
        }
        Norm::L2 => {
            let gn = libm::sqrt(grad.sum_sq());
            if gn > 0.0 {
                for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
                    *d += budget.step_size * g / gn;
                }
            }
            let n = libm::sqrt(delta.sum_sq());
            if n > eps {
                let s = eps / n;
                delta.data_mut().iter_mut().for_each(|d| *d *= s);
            }
        }
    }
    for ((a, &d), &xi) in adv.data_mut().iter_mut().zip(delta.data()).zip(x.data()) {
        *a = (xi + d).clamp(0.0, 1.0);
        if budget.norm == Norm::LInf {
            // x + d can round past the ball; nudge back so adv - x <= eps exactly.
            while *a - xi > eps {
                *a = a.next_down();
            }
            while xi - *a > eps {
                *a = a.next_up();
            }
        }
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_iterate(x: &Tensor, adv: &Tensor, budget: &AttackBudget, k: usize) -> Result<()> {
    let n = budget.norm.measure(&difference(adv, x));
    if n > budget.epsilon + BUDGET_SLACK {
        return Err(Error::Budget(format!(
            "iterate {k}: {} norm {n} exceeds epsilon {}",
            budget.norm.name(),
            budget.epsilon
        )));
    }
    if adv.data().iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Budget(format!("iterate {k}: perturbed pixels leave [0, 1]")));
    }
    Ok(())
}

/// Uniform random-sign perturbation at full budget, clamped to valid pixels.
pub fn random_sign_baseline(x: &Tensor, budget: &AttackBudget) -> Result<Perturbation> {
    use rand::Rng;
    budget.validate()?;
    let mut r = rng::seeded(rng::derive(budget.seed, streams::BASELINE, 0));
    let mut delta = Tensor::from_fn(x.shape(), |_| if r.random::<bool>() { budget.epsilon } else { -budget.epsilon });
    if budget.norm == Norm::L2 {
        let s = budget.epsilon / libm::sqrt(delta.sum_sq());
        delta = delta.scale(s);
    }
    let adv = Tensor::from_fn(x.shape(), |i| (x.data()[i] + delta.data()[i]).clamp(0.0, 1.0));
    let p = Perturbation {
        delta: difference(&adv, x),
        budget: *budget,
    };
    p.check_budget()?;
    Ok(p)
}

/// Targeted encoder baseline: PGD descent pulling the image latent toward
/// `target_latent` under the same budget. No diffusion model in the loop.
pub fn encoder_target_baseline<B: InpaintDenoiser + ?Sized>(
    backend: &B,
    context: &ContextImage,
    target_latent: &Tensor,
    budget: &AttackBudget,
) -> Result<(Perturbation, Vec<f64>)> {
    budget.validate()?;
    target_latent.expect_shape(&backend.spec().latent_shape, "target latent")?;
    let x = context.pixels();
    let mut adv = x.clone();
    let mut losses = Vec::with_capacity(budget.iterations);
    for k in 0..budget.iterations {
        let mut g = Graph::new();
        let px = g.variable(adv.clone());
        let z = backend.trace_encode_image(&mut g, px)?;
        let t = g.constant(target_latent.clone());
        let diff = g.sub(z, t)?;
        let root = g.sum_squares(diff);
        let loss = g.value(root).data()[0];
        if !loss.is_finite() {
            return Err(Error::non_finite("encoder baseline loss", k));
        }
        losses.push(loss);
        let grad = g.backward(root)?.wrt(px).scale(-1.0);
        update(&mut adv, &grad, x, budget);
        check_iterate(x, &adv, budget, k + 1)?;
    }
    let delta = difference(&adv, x);
    Ok((Perturbation { delta, budget: *budget }, losses))
}

/// Stable hash of everything that determines an attack's output.
pub fn attack_fingerprint(budget: &AttackBudget, dist: &TimestepDistribution, centroid: &SemanticCentroid) -> u64 {
    let mut h = Fnv::new();
    for v in [
        budget.epsilon.to_bits(),
        budget.step_size.to_bits(),
        budget.iterations as u64,
        budget.grad_avg as u64,
        budget.seed,
        budget.norm as u64,
        dist.mean.to_bits(),
        dist.std.to_bits(),
        dist.clamp_range.0 as u64,
        dist.clamp_range.1 as u64,
        centroid.config_hash(),
    ] {
        h.write_u64(v);
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyBackend, ToyConfig};
    use crate::centroid::{centroid_from_bundles, estimate_centroid};

    struct Fixture {
        b: ToyBackend,
        ctx: ContextImage,
        mask: InpaintMask,
        tau: Tensor,
    }

    fn fixture() -> Fixture {
        let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
        let px = Tensor::from_fn(&[3, 8, 8], |i| 0.1 + 0.8 * ((i * 5) % 13) as f64 / 12.0);
        let ctx = ContextImage::new(&b, px, "t").unwrap();
        let mask = InpaintMask::rectangle(8, 8, 2, [2, 6, 2, 6], true).unwrap();
        let tau = b.null_text_embedding(3).unwrap();
        Fixture { b, ctx, mask, tau }
    }

    fn small_budget(iterations: usize) -> AttackBudget {
        AttackBudget {
            iterations,
            grad_avg: 2,
            ..AttackBudget::default()
        }
    }

    #[test]
    fn budget_validation() {
        assert!(AttackBudget::default().validate().is_ok());
        for b in [
            AttackBudget { step_size: 0.1, ..Default::default() },
            AttackBudget { iterations: 0, ..Default::default() },
            AttackBudget { grad_avg: 0, ..Default::default() },
            AttackBudget { epsilon: 0.0, ..Default::default() },
        ] {
            assert!(b.validate().is_err());
        }
    }

    #[test]
    fn stationary_point_leaves_delta_unchanged() {
        let f = fixture();
        let dist = TimestepDistribution::default();
        let budget = AttackBudget {
            iterations: 1,
            grad_avg: 1,
            ..AttackBudget::default()
        };
        let d = &attack_draws(&f.b.spec().latent_shape, &dist, budget.seed, 0, 1)[0];
        let h = f.b.forward(&d.z_t, d.t, &f.ctx, &f.mask, &f.tau).unwrap().hidden;
        let c = centroid_from_bundles(&[h], context_fingerprint(&f.ctx, &f.mask, &f.tau)).unwrap();
        let w = LayerWeights::uniform(2);
        let target = AttackTarget {
            mask: &f.mask,
            tau: &f.tau,
            centroid: &c,
            weights: &w,
        };
        let (p, trace) = pgd_ascend(&f.b, &f.ctx, &target, &dist, &budget, &PgdOptions::default(), &NoClock, |_, _, _| {}).unwrap();
        assert_eq!(trace.losses[0], 0.0);
        assert_eq!(p.delta.max_abs(), 0.0);
    }

    #[test]
    fn sign_steps_have_exact_magnitude_and_stay_in_budget() {
        let f = fixture();
        let dist = TimestepDistribution::default();
        let c = estimate_centroid(&f.b, &f.ctx, &f.mask, &f.tau, &CentroidConfig { samples: 2, ..Default::default() }).unwrap();
        let w = LayerWeights::uniform(2);
        let target = AttackTarget {
            mask: &f.mask,
            tau: &f.tau,
            centroid: &c,
            weights: &w,
        };
        let budget = small_budget(1);
        let draws = attack_draws(&f.b.spec().latent_shape, &dist, budget.seed, 0, budget.grad_avg);
        let (g, _) = digression_step(&f.b, f.ctx.pixels(), &target, &draws).unwrap();
        let (p, _) = pgd_ascend(&f.b, &f.ctx, &target, &dist, &budget, &PgdOptions::default(), &NoClock, |_, _, _| {}).unwrap();
        for ((&d, &gi), &xi) in p.delta.data().iter().zip(g.data()).zip(f.ctx.pixels().data()) {
            if gi != 0.0 {
                let free = xi + budget.step_size * sign(gi);
                if (0.0..=1.0).contains(&free) {
                    assert!((d - budget.step_size * sign(gi)).abs() < 1e-15);
                }
            } else {
                assert_eq!(d, 0.0);
            }
        }
        let (p, trace) = pgd_ascend(&f.b, &f.ctx, &target, &dist, &small_budget(6), &PgdOptions::default(), &NoClock, |_, _, _| {}).unwrap();
        assert!(p.delta.max_abs() <= budget.epsilon + 1e-9);
        assert!(trace.norms.iter().all(|&n| n <= budget.epsilon + 1e-9));
        assert_eq!(trace.losses.len(), 7);
        assert!(trace.best_loss >= trace.losses[0]);
    }

    #[test]
    fn mismatched_centroid_is_rejected() {
        let f = fixture();
        let c = estimate_centroid(&f.b, &f.ctx, &f.mask, &f.tau, &CentroidConfig { samples: 1, ..Default::default() }).unwrap();
        let other = f.b.null_text_embedding(2).unwrap();
        let w = LayerWeights::uniform(2);
        let target = AttackTarget {
            mask: &f.mask,
            tau: &other,
            centroid: &c,
            weights: &w,
        };
        let r = pgd_ascend(&f.b, &f.ctx, &target, &TimestepDistribution::default(), &small_budget(1), &PgdOptions::default(), &NoClock, |_, _, _| {});
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn l2_variant_stays_in_ball() {
        let f = fixture();
        let dist = TimestepDistribution::default();
        let c = estimate_centroid(&f.b, &f.ctx, &f.mask, &f.tau, &CentroidConfig { samples: 2, ..Default::default() }).unwrap();
        let w = LayerWeights::uniform(2);
        let target = AttackTarget {
            mask: &f.mask,
            tau: &f.tau,
            centroid: &c,
            weights: &w,
        };
        let budget = AttackBudget {
            epsilon: 0.2,
            step_size: 0.1,
            norm: Norm::L2,
            ..small_budget(4)
        };
        let (p, _) = pgd_ascend(&f.b, &f.ctx, &target, &dist, &budget, &PgdOptions::default(), &NoClock, |_, _, _| {}).unwrap();
        assert!(Norm::L2.measure(&p.delta) <= 0.2 + 1e-12);
        assert!(Norm::L2.measure(&p.delta) > 0.0);
    }

    #[test]
    fn baselines_respect_budget() {
        let f = fixture();
        let b = AttackBudget::default();
        let p = random_sign_baseline(f.ctx.pixels(), &b).unwrap();
        assert!(p.delta.max_abs() <= b.epsilon + 1e-12);
        let target = Tensor::zeros(&f.b.spec().latent_shape);
        let (p, losses) = encoder_target_baseline(&f.b, &f.ctx, &target, &small_budget(5)).unwrap();
        assert!(p.delta.max_abs() <= b.epsilon + 1e-12);
        assert!(losses.last().unwrap() < &losses[0]);
    }
}
