//! Distortion generators against independent reference computations.

use stabletrain::distortions::{
    apply, fgsm, gaussian_noise, gaussian_noise_unclipped, jpeg_compress, offset_crop, rotate, rotate_by,
    thumbnail_resize, DistortContext, DistortionSpec, LossGradient, RngStream, ThumbnailMode,
};
use stabletrain::{psnr, Image, Result};

/// Smooth, photo-like test image: low-frequency gradients plus mild texture.
fn natural(h: usize, w: usize, phase: f64) -> Image {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
            for c in 0..3 {
                let base = 0.5 + 0.3 * (2.0 * fx + phase + c as f64).sin() * (1.5 * fy + 0.4 * c as f64).cos();
                let tex = 0.04 * ((x * 7 + y * 3 + c) as f64 * 0.9 + phase).sin();
                data.push((base + tex).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(h, w, 3, data).unwrap()
}

#[test]
fn gaussian_pre_clip_std_matches_sigma() {
    let img = Image::filled(1000, 1000, 1, 0.5);
    let sigma = 0.05;
    let noisy = gaussian_noise_unclipped(&img, sigma, &mut RngStream::new(42)).unwrap();
    let diffs: Vec<f64> = noisy.iter().zip(img.data()).map(|(&a, &b)| a - b as f64).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std / sigma - 1.0).abs() < 0.01, "sample std {std}");
}

#[test]
fn gaussian_is_reproducible_and_rejects_negative_sigma() {
    let img = natural(16, 16, 0.0);
    let a = gaussian_noise(&img, 0.1, &mut RngStream::new(7)).unwrap();
    let b = gaussian_noise(&img, 0.1, &mut RngStream::new(7)).unwrap();
    assert_eq!(a, b);
    assert!(a.in_unit_range());
    assert!(gaussian_noise(&img, -0.1, &mut RngStream::new(7)).is_err());
}

#[test]
fn jpeg_high_quality_is_near_lossless() {
    for phase in [0.0, 1.3, 2.9] {
        let img = natural(64, 48, phase);
        let out = jpeg_compress(&img, 100).unwrap();
        let p = psnr(&img, &out).unwrap();
        assert!(p >= 45.0, "q=100 psnr {p}");
    }
}

#[test]
fn jpeg_psnr_falls_with_quality() {
    let images: Vec<Image> = (0..4).map(|i| natural(40, 40, i as f64)).collect();
    let mean_psnr = |q| {
        images
            .iter()
            .map(|im| psnr(im, &jpeg_compress(im, q).unwrap()).unwrap())
            .sum::<f64>()
            / images.len() as f64
    };
    let (p90, p50, p10) = (mean_psnr(90), mean_psnr(50), mean_psnr(10));
    assert!(p90 >= p50 && p50 >= p10, "{p90} {p50} {p10}");
}

#[test]
fn jpeg_recompression_is_stable() {
    let img = natural(32, 32, 0.7);
    for q in [10, 30, 75] {
        let once = jpeg_compress(&img, q).unwrap();
        let twice = jpeg_compress(&once, q).unwrap();
        let d = psnr(&img, &once).unwrap() - psnr(&img, &twice).unwrap();
        assert!(d.abs() < 1.0, "q={q}: psnr changed by {d}");
        assert!(twice.in_unit_range());
    }
}

/// Half-pixel linear interpolation along one axis, written independently.
fn interp_axis(src: &[f64], out_len: usize) -> Vec<f64> {
    let n = src.len();
    (0..out_len)
        .map(|i| {
            let s = ((i as f64 + 0.5) * n as f64 / out_len as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let t = s - lo as f64;
            src[lo] * (1.0 - t) + src[hi] * t
        })
        .collect()
}

#[test]
fn thumbnail_half_side_matches_two_pass_upsample() {
    let (side, ch) = (16usize, 3usize);
    let img = natural(side, side, 0.4);
    let a = side / 2;
    let out = thumbnail_resize(&img, a as u32, ThumbnailMode::CropResize).unwrap();
    let off = (side - a) / 2;
    for c in 0..ch {
        // Rows first, then columns.
        let rows: Vec<Vec<f64>> = (0..a)
            .map(|y| {
                let line: Vec<f64> = (0..a).map(|x| img.get(off + y, off + x, c) as f64).collect();
                interp_axis(&line, side)
            })
            .collect();
        for x in 0..side {
            let col: Vec<f64> = rows.iter().map(|r| r[x]).collect();
            let up = interp_axis(&col, side);
            for y in 0..side {
                let got = out.get(y, x, c) as f64;
                assert!((got - up[y]).abs() < 1e-6, "({y},{x},{c}): {got} vs {}", up[y]);
            }
        }
    }
}

#[test]
fn thumbnail_rejects_bad_side() {
    let img = natural(8, 10, 0.0);
    assert!(thumbnail_resize(&img, 0, ThumbnailMode::CropResize).is_err());
    assert!(thumbnail_resize(&img, 9, ThumbnailMode::CropResize).is_err());
    assert!(thumbnail_resize(&img, 8, ThumbnailMode::Downsample).is_ok());
}

#[test]
fn quarter_turns_are_exact_permutations() {
    let n = 7;
    let img = natural(n, n, 0.2);
    let mut expect = img.clone();
    for turn in 1..=3 {
        // Counter-clockwise quarter turn: out(y, x) = in(x, n - 1 - y).
        let prev = expect.clone();
        let mut data = Vec::with_capacity(n * n * 3);
        for y in 0..n {
            for x in 0..n {
                for c in 0..3 {
                    data.push(prev.get(x, n - 1 - y, c));
                }
            }
        }
        expect = Image::new(n, n, 3, data).unwrap();
        let got = rotate_by(&img, 90.0 * turn as f64, &[0.0; 3]).unwrap();
        assert_eq!(got, expect, "{} degrees", 90 * turn);
    }
}

#[test]
fn random_rotation_is_reproducible_and_bounded() {
    let img = natural(12, 12, 0.0);
    let fill = [0.2, 0.3, 0.4];
    let a = rotate(&img, 30.0, &mut RngStream::new(5), &fill).unwrap();
    let b = rotate(&img, 30.0, &mut RngStream::new(5), &fill).unwrap();
    assert_eq!(a, b);
    assert!(rotate(&img, 181.0, &mut RngStream::new(5), &fill).is_err());
    assert!(rotate(&img, -1.0, &mut RngStream::new(5), &fill).is_err());
}

#[test]
fn offset_crop_center_stays_in_neighborhood() {
    let mut data = Vec::new();
    for y in 0..12 {
        for x in 0..12 {
            data.push((y * 12 + x) as f32 / 144.0);
        }
    }
    let full = Image::new(12, 12, 1, data).unwrap();
    let mut rng = RngStream::new(3);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..400 {
        let out = offset_crop(&full, 1, 8, &mut rng).unwrap();
        let v = (out.get(0, 0, 0) * 144.0).round() as i64;
        let (dy, dx) = (v / 12 - 2, v % 12 - 2);
        assert!(dy.abs() <= 1 && dx.abs() <= 1);
        seen.insert((dy, dx));
    }
    assert_eq!(seen.len(), 9);
}

struct Logistic {
    w: f64,
}

impl LossGradient for Logistic {
    fn loss_gradients(&self, images: &[Image], labels: &[usize]) -> Result<Vec<Image>> {
        // L = -log sigmoid(w x) for label 1, -log(1 - sigmoid(w x)) for label 0.
        Ok(images
            .iter()
            .zip(labels)
            .map(|(im, &y)| {
                let g: Vec<f32> = im
                    .data()
                    .iter()
                    .map(|&x| {
                        let s = 1.0 / (1.0 + (-self.w * x as f64).exp());
                        (if y == 1 { -(1.0 - s) * self.w } else { s * self.w }) as f32
                    })
                    .collect();
                Image::new(im.height(), im.width(), im.channels(), g).unwrap()
            })
            .collect())
    }
}

#[test]
fn fgsm_on_logistic_model() {
    let model = Logistic { w: 2.0 };
    let x = Image::new(1, 1, 1, vec![0.5]).unwrap();
    let g = model.loss_gradients(std::slice::from_ref(&x), &[1]).unwrap();
    assert!((g[0].data()[0] as f64 + 0.537883).abs() < 1e-6);
    let adv = fgsm(&x, 1, &model, 0.1).unwrap();
    assert!((adv.data()[0] - 0.4).abs() < 1e-7);
    assert_eq!(fgsm(&x, 1, &model, 0.0).unwrap(), x);
}

#[test]
fn compose_equals_manual_two_step() {
    let img = natural(10, 10, 1.0);
    let fill = [0.5f32; 3];
    let spec: DistortionSpec = "gaussian:0.08+rotation:25".parse().unwrap();
    let ctx = DistortContext {
        fill: Some(&fill),
        ..Default::default()
    };
    let composed = apply(&spec, &img, 0, &mut RngStream::new(9), &ctx).unwrap();
    let mut rng = RngStream::new(9);
    let noisy = gaussian_noise(&img, 0.08, &mut rng).unwrap();
    let manual = rotate(&noisy, 25.0, &mut rng, &fill).unwrap();
    assert_eq!(composed, manual);
}
