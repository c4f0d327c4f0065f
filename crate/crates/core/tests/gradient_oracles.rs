//! Autodiff gradients of the two optimized losses against central finite
//! differences on the tiny toy backend.

use digress_core::attack::{self, AttackTarget};
use digress_core::backend::toy::{ToyBackend, ToyConfig};
use digress_core::backend::InpaintDenoiser;
use digress_core::centroid::{estimate_centroid, CentroidConfig, LayerWeights};
use digress_core::inversion::{inversion_loss, inversion_loss_grad};
use digress_core::masking::{ContextImage, InpaintMask};
use digress_core::rng;
use digress_core::timestep::TimestepDistribution;
use digress_core::Tensor;
use rand::Rng;

const RTOL: f64 = 1e-2;
const H: f64 = 1e-5;

fn setup() -> (ToyBackend, ContextImage, InpaintMask) {
    let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
    let px = Tensor::from_fn(&[3, 8, 8], |i| 0.15 + 0.7 * ((i * 7) % 11) as f64 / 10.0);
    let ctx = ContextImage::new(&b, px, "fixture").unwrap();
    let mask = InpaintMask::rectangle(8, 8, 2, [0, 4, 0, 8], true).unwrap();
    (b, ctx, mask)
}

/// Picks `n` distinct coordinates whose analytic gradient is not negligible,
/// so a relative tolerance is meaningful.
fn coordinates(grad: &Tensor, n: usize, seed: u64) -> Vec<usize> {
    let max = grad.max_abs();
    let eligible: Vec<usize> = (0..grad.len()).filter(|&i| grad.data()[i].abs() > 1e-3 * max).collect();
    assert!(eligible.len() >= n, "too few informative coordinates");
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let i = eligible[r.random_range(0..eligible.len())];
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

fn check(name: &str, grad: &Tensor, x: &Tensor, f: impl Fn(&Tensor) -> f64, seed: u64) {
    for i in coordinates(grad, 6, seed) {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let fd = (f(&plus) - f(&minus)) / (2.0 * H);
        let g = grad.data()[i];
        assert!(
            (fd - g).abs() <= RTOL * fd.abs().max(g.abs()),
            "{name}[{i}]: autodiff {g:e} vs finite difference {fd:e}"
        );
    }
}

#[test]
fn inversion_loss_matches_finite_differences() {
    let (b, ctx, mask) = setup();
    let mut r = rng::seeded(11);
    let pi = rng::normal_tensor(&mut r, &[3, b.spec().embed_dim]).scale(0.3);
    let z = rng::normal_tensor(&mut r, &b.spec().latent_shape);
    let eps = rng::normal_tensor(&mut r, &b.spec().latent_shape);
    let (_, grad) = inversion_loss_grad(&b, &pi, &ctx, &mask, &z, 600, &eps).unwrap();
    check(
        "inversion",
        &grad,
        &pi,
        |p| inversion_loss(&b, p, &ctx, &mask, &z, 600, &eps).unwrap(),
        1,
    );
}

#[test]
fn digression_loss_matches_finite_differences() {
    let (b, ctx, mask) = setup();
    let tau = b.null_text_embedding(3).unwrap();
    let cfg = CentroidConfig {
        samples: 4,
        ..Default::default()
    };
    let centroid = estimate_centroid(&b, &ctx, &mask, &tau, &cfg).unwrap();
    let weights = LayerWeights::uniform(centroid.layers().len());
    let target = AttackTarget {
        mask: &mask,
        tau: &tau,
        centroid: &centroid,
        weights: &weights,
    };
    let draws = attack::attack_draws(&b.spec().latent_shape, &TimestepDistribution::default(), 5, 0, 3);
    let (grad, _) = attack::digression_step(&b, ctx.pixels(), &target, &draws).unwrap();
    check(
        "digression",
        &grad,
        ctx.pixels(),
        |x| attack::digression_loss(&b, x, &target, &draws).unwrap(),
        2,
    );
}
