use std::fs;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgfi::data::{
    decode_ppm, encode_ppm, gen_synthetic, load_split, render, render_triplet, scene_for, GenParams, Scene, Shape,
    ShapeKind, Split,
};
use sgfi::metrics::{psnr, ssim};
use sgfi::Tensor;

/// Windowed SSIM evaluated window by window with the full 2-D kernel.
fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = a.dims3().unwrap();
    let gray = |t: &Tensor, i: usize, j: usize| (0..c).map(|ch| t.at3(ch, i, j)).sum::<f64>() / c as f64;
    let g1: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let s1: f64 = g1.iter().sum();
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - 11 {
        for j in 0..=w - 11 {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let k = g1[u] * g1[v] / (s1 * s1);
                    let x = gray(a, i + u, j + v);
                    let y = gray(b, i + u, j + v);
                    mx += k * x;
                    my += k * y;
                    xx += k * x * x;
                    yy += k * y * y;
                    xy += k * x * y;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_window_by_window_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (h, w) in [(11, 11), (16, 13), (20, 24)] {
        let a = Tensor::uniform([3, h, w], 0.0, 1.0, &mut rng);
        let mut b = a.clone();
        b.axpy(1.0, &Tensor::uniform([3, h, w], -0.2, 0.2, &mut rng));
        let got = ssim(&a, &b).unwrap();
        assert!((got - ssim_reference(&a, &b)).abs() < 1e-9);
        assert_eq!(got, ssim(&b, &a).unwrap());
    }
}

#[test]
fn psnr_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Tensor::uniform([3, 6, 7], 0.0, 1.0, &mut rng);
    let b = Tensor::uniform([3, 6, 7], 0.0, 1.0, &mut rng);
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
    assert!((psnr(&a, &b, 1.0).unwrap() - (-10.0 * mse.log10())).abs() < 1e-12);
    assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    let c = a.map(|v| v + 0.1);
    assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
}

fn flat_disc_scene() -> Scene {
    Scene {
        size: 24,
        background: [[0.2, 0.3, 0.4]; 2],
        bg_freq: (0.1, 0.1),
        shapes: vec![Shape {
            kind: ShapeKind::Circle { radius: 5.3 },
            center: (10.2, 7.9),
            angle: 0.4,
            velocity: (3.0, 8.6),
            spin: 0.2,
            colors: [[0.9, 0.6, 0.1]; 2],
            stripe_freq: 0.7,
        }],
    }
}

/// Coverage of a flat disc by the 3×3 subsample grid of every pixel.
/// Pixels with a subsample within rounding of the rim are NaN.
fn disc_oracle(t: f64) -> Tensor {
    let (cy, cx) = (10.2 + 3.0 * t, 7.9 + 8.6 * t);
    let (bg, fg) = ([0.2, 0.3, 0.4], [0.9, 0.6, 0.1]);
    let mut out = Tensor::zeros([3, 24, 24]);
    for i in 0..24 {
        for j in 0..24 {
            let mut hits = 0;
            let mut rim = false;
            for a in 0..3 {
                for b in 0..3 {
                    let y = i as f64 + (a as f64 + 0.5) / 3.0 - 0.5;
                    let x = j as f64 + (b as f64 + 0.5) / 3.0 - 0.5;
                    let d = (y - cy).powi(2) + (x - cx).powi(2) - 5.3 * 5.3;
                    rim |= d.abs() < 1e-9;
                    if d <= 0.0 {
                        hits += 1;
                    }
                }
            }
            let f = if rim { f64::NAN } else { hits as f64 / 9.0 };
            for ch in 0..3 {
                out.data_mut()[(ch * 24 + i) * 24 + j] = bg[ch] * (1.0 - f) + fg[ch] * f;
            }
        }
    }
    out
}

#[test]
fn middle_frame_is_the_half_time_render() {
    let scene = flat_disc_scene();
    let trip = render_triplet(&scene);
    for (t, img) in [(0.0, &trip.i0), (0.5, &trip.gt), (1.0, &trip.i1)] {
        let exact = disc_oracle(t);
        let r = render(&scene, t);
        let mut checked = 0;
        for ((e, v), q) in exact.data().iter().zip(r.data()).zip(img.data()) {
            if e.is_nan() {
                continue;
            }
            checked += 1;
            assert!((e - v).abs() < 1e-12, "t = {t}");
            // 8-bit frames sit within half a level
            assert!((e - q).abs() <= 0.5 / 255.0 + 1e-12, "t = {t}");
        }
        assert!(checked > exact.numel() - 30);
        assert!(img.data().iter().all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }
    assert!(trip.gt.max_abs_diff(&trip.i0) > 0.1);
}

#[test]
fn generation_is_deterministic() {
    let params = GenParams {
        seed: 4,
        size: 16,
        train_count: 3,
        val_count: 2,
        ..GenParams::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(a.path(), &params).unwrap();
    gen_synthetic(b.path(), &params).unwrap();
    for split in ["train", "val"] {
        let n = if split == "train" { 3 } else { 2 };
        for idx in 0..n {
            for f in ["im1.ppm", "im2.ppm", "im3.ppm"] {
                let p = format!("{split}/{idx:05}/{f}");
                assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap(), "{p}");
            }
        }
    }
    let loaded = load_split(&a.path().join("val")).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded[1], render_triplet(&scene_for(&params, Split::Val, 1)));
    let other = GenParams { seed: 5, ..params.clone() };
    assert_ne!(scene_for(&other, Split::Train, 0), scene_for(&params, Split::Train, 0));
    assert_ne!(scene_for(&params, Split::Val, 0), scene_for(&params, Split::Train, 0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ppm_round_trip(bytes in prop::collection::vec(any::<u8>(), 3 * 5 * 4)) {
        let img = Tensor::new(vec![3, 5, 4], {
            // planar from interleaved
            let mut d = vec![0.0; 60];
            for p in 0..20 {
                for c in 0..3 {
                    d[c * 20 + p] = bytes[p * 3 + c] as f64 / 255.0;
                }
            }
            d
        }).unwrap();
        let enc = encode_ppm(&img).unwrap();
        prop_assert_eq!(&enc[enc.len() - 60..], &bytes[..]);
        prop_assert_eq!(decode_ppm(&enc).unwrap(), img);
    }

    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::uniform([3, 12, 12], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform([3, 12, 12], 0.0, 1.0, &mut rng);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }
}
