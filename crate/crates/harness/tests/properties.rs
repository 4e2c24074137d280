use proptest::prelude::*;
use refill_core::raster::Image;
use refill_harness::{brush_hole, psnr, ssim, BrushParams, Texture};

fn noisy(seed: u64, w: usize, h: usize, amp: f32) -> (Image, Image) {
    let a = Texture::new(seed, w as f64, h as f64).render(w, h);
    let b = Image::from_fn(w, h, 3, |x, y, c| {
        let k = (x * 31 + y * 17 + c * 7 + seed as usize) % 13;
        (a.get(x, y, c) + amp * (k as f32 / 12.0 - 0.5)).clamp(0.0, 1.0)
    });
    (a, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn brush_holes_stay_in_fraction_bounds(seed in any::<u64>(), w in 64usize..200, h in 64usize..200) {
        let p = BrushParams::default();
        match brush_hole((w, h), &p, seed) {
            Ok(m) => {
                let f = m.hole_fraction();
                prop_assert!((0.05..=0.40).contains(&f), "{f}");
                prop_assert_eq!(brush_hole((w, h), &p, seed).unwrap(), m);
            }
            Err(refill_harness::Error::HoleGeneration { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn metrics_are_symmetric_and_bounded(seed in 0u64..1000, amp in 0.0f32..0.5) {
        let (a, b) = noisy(seed, 40, 32, amp);
        let p = psnr(&a, &b, None).unwrap();
        prop_assert_eq!(p, psnr(&b, &a, None).unwrap());
        prop_assert!(p >= 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}
