use abd_core::augmentation::{
    augment_pair, color_jitter, cutout_rect, gaussian_blur, strong_augment_traced, weak_augment, StrongConfig, StrongOp,
    WeakTransform,
};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(seed: u64, h: usize, w: usize) -> Array3<f32> {
    Array3::from_shape_fn((1, h, w), |(_, r, c)| {
        let v = (seed as usize).wrapping_mul(31).wrapping_add(r * 17 + c * 5) % 97;
        v as f32 / 96.0
    })
}

fn sorted(x: impl Iterator<Item = f32>) -> Vec<f32> {
    let mut v: Vec<f32> = x.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

proptest! {
    #[test]
    fn weak_transform_moves_image_and_label_together(seed in any::<u64>(), h in 2usize..10, w in 2usize..10) {
        // A label that encodes the pixel position lets us track where each pixel went.
        let x = Array3::from_shape_fn((1, h, w), |(_, r, c)| (r * w + c) as f32);
        let y = Array2::from_shape_fn((h, w), |(r, c)| (r * w + c) as u8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xa, ya, t) = weak_augment(x.view(), Some(y.view()), &mut rng).unwrap();
        let ya = ya.unwrap();
        prop_assert_eq!(xa.dim(), (1, h, w));
        prop_assert_eq!(sorted(xa.iter().copied()), sorted(x.iter().copied()));
        for (&a, &b) in xa.iter().zip(ya.iter()) {
            prop_assert_eq!(a as u8, b);
        }
        if h != w {
            prop_assert!(t.quarter_turns % 2 == 0);
        }
        prop_assert_eq!(t.apply(x.view()), xa);
    }

    #[test]
    fn jitter_is_pointwise_and_in_range(seed in 0u64..1000, b in 0.6f32..1.4, c in 0.6f32..1.4) {
        let x = image(seed, 8, 8);
        let mut y = x.clone();
        color_jitter(&mut y, b, c);
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        // Order preserving: equal inputs give equal outputs and larger never become smaller.
        for (i, (&xi, &yi)) in x.iter().zip(y.iter()).enumerate() {
            for (&xj, &yj) in x.iter().zip(y.iter()).skip(i + 1) {
                if xi < xj { prop_assert!(yi <= yj); }
                if xi == xj { prop_assert_eq!(yi, yj); }
            }
        }
    }

    #[test]
    fn cutout_area_within_bounds(seed in any::<u64>(), h in 8usize..40, w in 8usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = cutout_rect(&mut rng, h, w, (0.1, 0.3));
        let frac = (r.h * r.w) as f64 / (h * w) as f64;
        prop_assert!(r.r0 + r.h <= h && r.c0 + r.w <= w);
        prop_assert!((0.1..=0.3).contains(&frac), "fraction {frac} for {:?} in {h}x{w}", r);
    }

    #[test]
    fn pair_replays_from_seed(seed in any::<u64>()) {
        let x = image(seed, 12, 12);
        let y = Array2::from_shape_fn((12, 12), |(r, _)| (r % 3) as u8);
        let cfg = StrongConfig { ops: vec![StrongOp::ColorJitter, StrongOp::Blur, StrongOp::Cutout], ..StrongConfig::default() };
        let a = augment_pair(x.view(), Some(y.view()), seed, &cfg, true).unwrap();
        let b = augment_pair(x.view(), Some(y.view()), a.seed_record, &cfg, true).unwrap();
        prop_assert_eq!(&a, &b);
        let off = augment_pair(x.view(), Some(y.view()), seed, &cfg, false).unwrap();
        prop_assert_eq!(&off.x_w, &off.x_s);
        prop_assert_eq!(&off.x_w, &a.x_w);
    }
}

#[test]
fn cutout_fills_exactly_its_rectangle() {
    let x = Array3::from_elem((1, 16, 16), 0.25f32);
    let cfg = StrongConfig { ops: vec![StrongOp::Cutout], fill: 0.75, ..StrongConfig::default() };
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, rect) = strong_augment_traced(x.view(), &mut rng, &cfg);
        let r = rect.unwrap();
        for ((_, row, col), &v) in y.indexed_iter() {
            let inside = (r.r0..r.r0 + r.h).contains(&row) && (r.c0..r.c0 + r.w).contains(&col);
            assert_eq!(v, if inside { 0.75 } else { 0.25 });
        }
    }
}

#[test]
fn blur_keeps_constants_and_mass() {
    let flat = Array3::from_elem((1, 9, 7), 0.4f32);
    let out = gaussian_blur(flat.view(), 1.3);
    assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-6));
    let x = image(3, 9, 7);
    let out = gaussian_blur(x.view(), 0.8);
    let (lo, hi) = (x.iter().cloned().fold(f32::MAX, f32::min), x.iter().cloned().fold(f32::MIN, f32::max));
    assert!(out.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
}

#[test]
fn strong_config_validation() {
    assert!(StrongConfig::default().validate().is_ok());
    let bad = StrongConfig { cutout_area: (0.4, 0.2), ..StrongConfig::default() };
    assert!(bad.validate().is_err());
    assert_eq!("blur".parse::<StrongOp>().unwrap(), StrongOp::Blur);
    assert!("sharpen".parse::<StrongOp>().is_err());
    assert_eq!(WeakTransform::IDENTITY.apply_plane(Array2::<u8>::eye(3).view()), Array2::<u8>::eye(3));
}
