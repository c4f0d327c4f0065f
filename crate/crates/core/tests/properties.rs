use digress_core::attack::{pgd_ascend, AttackBudget, AttackTarget, NoClock, Norm, PgdOptions};
use digress_core::backend::toy::{ToyBackend, ToyConfig};
use digress_core::backend::{HiddenStateBundle, InpaintDenoiser, Provenance};
use digress_core::centroid::{centroid_from_bundles, estimate_centroid, CentroidConfig, LayerWeights, SemanticCentroid};
use digress_core::eval::{psnr, ssim};
use digress_core::inversion::{project_tokens, ProjectionMetric, TokenPrompt};
use digress_core::masking::{ContextImage, InpaintMask};
use digress_core::rng;
use digress_core::timestep::{sample_timestep, TimestepDistribution};
use digress_core::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn timesteps_stay_in_range(mean in 1.0f64..1000.0, std in 0.01f64..300.0, lo in 1usize..500, span in 0usize..500, seed: u64) {
        let dist = TimestepDistribution { mean, std, clamp_range: (lo, lo + span) };
        let mut r = rng::seeded(seed);
        for _ in 0..200 {
            let t = sample_timestep(&dist, &mut r);
            prop_assert!((lo..=lo + span).contains(&t));
        }
    }

    #[test]
    fn projection_is_idempotent_onto_vocabulary(seed: u64, tokens in 1usize..6, euclid: bool) {
        let mut r = rng::seeded(seed);
        let vocab = rng::normal_tensor(&mut r, &[32, 8]);
        let pi = rng::normal_tensor(&mut r, &[tokens, 8]);
        let metric = if euclid { ProjectionMetric::Euclidean } else { ProjectionMetric::Cosine };
        let once = project_tokens(&TokenPrompt::new(pi).unwrap(), &vocab, metric).unwrap();
        let twice = project_tokens(&once, &vocab, metric).unwrap();
        prop_assert_eq!(&once.pi, &twice.pi);
        let ids = once.vocab_ids.clone().unwrap();
        for (row, id) in once.pi.data().chunks(8).zip(&ids) {
            prop_assert_eq!(row, &vocab.data()[id * 8..(id + 1) * 8]);
        }
    }

    #[test]
    fn half_sample_means_pool_to_the_full_mean(seed: u64, half in 1usize..20) {
        let mut r = rng::seeded(seed);
        let bundles: Vec<HiddenStateBundle> = (0..2 * half)
            .map(|_| HiddenStateBundle {
                entries: vec![
                    ("a".into(), rng::normal_tensor(&mut r, &[6])),
                    ("b".into(), rng::normal_tensor(&mut r, &[3]).scale(50.0)),
                ],
                timestep: 720,
                provenance: Provenance::default(),
            })
            .collect();
        let full = centroid_from_bundles(&bundles, 1).unwrap();
        let a = centroid_from_bundles(&bundles[..half], 1).unwrap();
        let b = centroid_from_bundles(&bundles[half..], 1).unwrap();
        let pooled = SemanticCentroid::pooled_mean(&a, &b).unwrap();
        for (x, y) in pooled.layers().iter().zip(full.layers()) {
            for (p, q) in x.mean.data().iter().zip(y.mean.data()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }

    #[test]
    fn metrics_are_symmetric_and_psnr_tracks_mse(seed: u64, scale in 0.01f64..0.3) {
        let mut r = rng::seeded(seed);
        let a = Tensor::from_fn(&[3, 12, 12], |_| rand::Rng::random::<f64>(&mut r));
        let noise = rng::normal_tensor(&mut r, &[3, 12, 12]);
        let b = a.zip_map(&noise, |x, n| (x + scale * n).clamp(0.0, 1.0)).unwrap();
        let c = a.zip_map(&noise, |x, n| (x + 2.0 * scale * n).clamp(0.0, 1.0)).unwrap();
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(psnr(&a, &b).unwrap() >= psnr(&a, &c).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_pgd_iterate_respects_the_budget(
        seed: u64,
        eps_255 in 1u32..32,
        step_frac in 0.05f64..1.0,
        iterations in 1usize..5,
        l2: bool,
        bright: bool,
    ) {
        let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
        // Saturated pixels exercise the [0, 1] clamp.
        let px = Tensor::from_fn(&[3, 8, 8], |i| if bright && i % 3 == 0 { 1.0 } else { ((i * 5) % 13) as f64 / 12.0 });
        let ctx = ContextImage::new(&b, px.clone(), "p").unwrap();
        let mask = InpaintMask::rectangle(8, 8, 2, [2, 6, 0, 8], true).unwrap();
        let tau = b.null_text_embedding(2).unwrap();
        let centroid = estimate_centroid(&b, &ctx, &mask, &tau, &CentroidConfig { samples: 2, ..Default::default() }).unwrap();
        let weights = LayerWeights::uniform(2);
        let target = AttackTarget { mask: &mask, tau: &tau, centroid: &centroid, weights: &weights };
        let epsilon = eps_255 as f64 / 255.0 * if l2 { 8.0 } else { 1.0 };
        let budget = AttackBudget {
            epsilon,
            step_size: epsilon * step_frac,
            iterations,
            grad_avg: 1,
            seed,
            norm: if l2 { Norm::L2 } else { Norm::LInf },
        };
        let mut seen = 0;
        let mut bad = None;
        let (p, trace) = pgd_ascend(&b, &ctx, &target, &TimestepDistribution::default(), &budget, &PgdOptions::default(), &NoClock, |k, _, adv| {
            seen += 1;
            let delta = adv.sub(&px).unwrap();
            if budget.norm.measure(&delta) > epsilon * (1.0 + 1e-12) || adv.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                bad = Some(k);
            }
        }).unwrap();
        prop_assert_eq!(seen, iterations);
        prop_assert_eq!(bad, None);
        prop_assert!(trace.norms.iter().all(|n| *n <= epsilon * (1.0 + 1e-12)));
        prop_assert!(p.check_budget().is_ok());
    }
}
