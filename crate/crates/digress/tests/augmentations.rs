//! Each augmentation against its nominal parameterization.

use digress::jpeg::{jpeg_round_trip, Jpeg};
use digress::pipeline::augment_by_name;
use digress_core::eval::{color_jitter, gaussian_noise, rotate_crop, Augmentation, Augmenter};
use digress_core::Tensor;

fn gradient_image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |n| {
        let (c, i, j) = (n / (h * w), (n / w) % h, n % w);
        0.1 + 0.6 * (i as f64 / h as f64) * (0.5 + 0.25 * c as f64) + 0.2 * (j as f64 / w as f64)
    })
}

#[test]
fn gaussian_noise_has_nominal_std() {
    let flat = Tensor::full(&[3, 128, 128], 0.5);
    let out = gaussian_noise(&flat, 5.0, 3).unwrap();
    let n = out.len() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let std = (out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / (5.0 / 255.0) - 1.0).abs() < 0.05, "std {}", std * 255.0);
    assert!((mean - 0.5).abs() < 1e-3);
    assert_eq!(gaussian_noise(&flat, 0.0, 3).unwrap(), flat);
    assert_eq!(Augmentation::NOISE.apply(&flat, 9).unwrap(), gaussian_noise(&flat, 5.0, 9).unwrap());
}

#[test]
fn jpeg_is_lossy_at_80_and_near_lossless_at_100() {
    let img = gradient_image(32, 32);
    let q80 = jpeg_round_trip(&img, 80).unwrap();
    let q100 = jpeg_round_trip(&img, 100).unwrap();
    assert_eq!(q80.shape(), img.shape());
    assert!(q80.sub(&img).unwrap().max_abs() > 1.0 / 255.0);
    // Chroma subsampling and 8-bit rounding bound what "lossless" can mean.
    assert!(q100.sub(&img).unwrap().max_abs() < 8.0 / 255.0);
    assert_eq!(Jpeg::default().quality, 80);
    assert_eq!(Jpeg::default().apply(&img, 0).unwrap(), q80);
    assert!(jpeg_round_trip(&img, 0).is_err());
}

#[test]
fn jitter_matches_closed_form() {
    // One saturated-free colour pixel repeated; mean luma equals its luma.
    let rgb = [0.4, 0.3, 0.2];
    let img = Tensor::from_fn(&[3, 4, 4], |n| rgb[n / 16]);
    let out = color_jitter(&img, 1.1, 1.1, 1.1).unwrap();
    let luma = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let b = rgb.map(|v| v * 1.1);
    // contrast pulls toward the mean luma y; saturation toward the pixel luma,
    // which contrast leaves at y
    let y = luma(b);
    let want = b.map(|v| 1.1 * (1.1 * v - 0.1 * y) - 0.1 * y);
    for c in 0..3 {
        assert!((out.data()[c * 16 + 5] - want[c]).abs() < 1e-12);
    }
    assert_eq!(color_jitter(&img, 1.0, 1.0, 1.0).unwrap(), img);
    assert!(color_jitter(&img, -1.0, 1.0, 1.0).is_err());
}

#[test]
fn jitter_contrast_pulls_towards_mean_luma() {
    let img = gradient_image(8, 8);
    let out = color_jitter(&img, 1.0, 1.1, 1.0).unwrap();
    let hw = 64;
    let luma = |t: &Tensor, i: usize| 0.299 * t.data()[i] + 0.587 * t.data()[hw + i] + 0.114 * t.data()[2 * hw + i];
    let mean = (0..hw).map(|i| luma(&img, i)).sum::<f64>() / hw as f64;
    for i in 0..img.len() {
        let want = (1.1 * img.data()[i] - 0.1 * mean).clamp(0.0, 1.0);
        assert!((out.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn rotate_crop_resamples_an_affine_image_exactly() {
    let (h, w) = (24, 24);
    let (gx, gy, c0) = (0.01, 0.015, 0.2);
    let img = Tensor::from_fn(&[1, h, w], |n| c0 + gx * (n % w) as f64 + gy * (n / w) as f64);
    let out = rotate_crop(&img, 5.0).unwrap();
    assert_eq!(out.shape(), img.shape());
    let th = 5f64.to_radians();
    // Largest centred square inside a square rotated by th.
    let scale = 1.0 / (th.cos() + th.sin());
    let at = |y: usize, x: usize| out.data()[y * w + x];
    let (dx, dy) = (at(10, 11) - at(10, 10), at(11, 10) - at(10, 10));
    assert!((dx - scale * (gx * th.cos() + gy * th.sin())).abs() < 1e-12);
    assert!((dy - scale * (gy * th.cos() - gx * th.sin())).abs() < 1e-12);
    // The crop is tight: some output corner lands on the source border.
    let lo = c0;
    let hi = c0 + gx * (w - 1) as f64 + gy * (h - 1) as f64;
    let corners = [at(0, 0), at(0, w - 1), at(h - 1, 0), at(h - 1, w - 1)];
    assert!(corners.iter().all(|v| (lo - 1e-12..=hi + 1e-12).contains(v)));
    // Centre is fixed.
    let centre = c0 + gx * (w - 1) as f64 / 2.0 + gy * (h - 1) as f64 / 2.0;
    let mid = (at(11, 11) + at(11, 12) + at(12, 11) + at(12, 12)) / 4.0;
    assert!((mid - centre).abs() < 1e-12);
}

#[test]
fn rotate_crop_keeps_constant_images_and_zero_angle() {
    let flat = Tensor::full(&[3, 16, 16], 0.7);
    let out = rotate_crop(&flat, 5.0).unwrap();
    assert!(out.sub(&flat).unwrap().max_abs() < 1e-12);
    let img = gradient_image(16, 16);
    assert!(rotate_crop(&img, 0.0).unwrap().sub(&img).unwrap().max_abs() < 1e-12);
}

#[test]
fn unknown_kind_is_rejected() {
    let img = gradient_image(16, 16);
    assert!(augment_by_name(&img, "sharpen", 0).is_err());
    for k in ["gaussian_noise", "jpeg", "jitter", "rotate_crop"] {
        assert_eq!(augment_by_name(&img, k, 0).unwrap().shape(), img.shape());
    }
}
