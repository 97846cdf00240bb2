//! Metric identities, masked/crop equivalence, the Wilcoxon test against
//! brute-force enumeration, and gradient maps.

use proptest::prelude::*;
use tod_core::evaluation::*;
use tod_core::networks::{build_denoiser, build_perceptual_net, build_segmenter};
use tod_core::phantom::{generate_case, DatasetConfig, Image, Mask};
use tod_core::SegmenterKind;

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..1.0f64, h * w).prop_map(move |d| Image::new(h, w, d).unwrap())
}

fn crop(img: &Image, r0: usize, c0: usize, h: usize, w: usize) -> Image {
    let data = (r0..r0 + h)
        .flat_map(|r| (c0..c0 + w).map(move |c| (r, c)))
        .map(|(r, c)| img.get(r, c))
        .collect();
    Image::new(h, w, data).unwrap()
}

fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> Mask {
    let data = (0..h * w)
        .map(|i| (r0..r0 + rh).contains(&(i / w)) && (c0..c0 + rw).contains(&(i % w)))
        .collect();
    Mask::new(h, w, data).unwrap()
}

/// Two-sided p-value by enumerating all 2ⁿ sign assignments.
fn brute_force_p(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return (0.0, 1.0);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|x| {
            let below = abs.iter().filter(|y| *y < x).count() as f64;
            let equal = abs.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let observed: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let stat = observed.min(total - observed);
    let mut extreme = 0u64;
    for signs in 0u64..1 << n {
        let w: f64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w.min(total - w) <= stat + 1e-9 {
            extreme += 1;
        }
    }
    (stat, extreme as f64 / (1u64 << n) as f64)
}

fn pairs(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    // Values on a coarse grid so ties and zero differences occur.
    (1..=max).prop_flat_map(|n| {
        (
            prop::collection::vec((0..8u8).prop_map(|v| v as f64 / 8.0), n),
            prop::collection::vec((0..8u8).prop_map(|v| v as f64 / 8.0), n),
        )
    })
}

fn cfg() -> ProptestConfig {
    ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn wilcoxon_matches_enumeration((a, b) in pairs(10)) {
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let (stat, p) = brute_force_p(&a, &b);
        prop_assert!(r.exact);
        prop_assert!((r.statistic - stat).abs() < 1e-12);
        prop_assert!((r.p_value - p).abs() < 1e-10, "{} vs {}", r.p_value, p);
    }

    #[test]
    fn wilcoxon_is_symmetric((a, b) in pairs(30)) {
        let x = wilcoxon_signed_rank(&a, &b).unwrap();
        let y = wilcoxon_signed_rank(&b, &a).unwrap();
        prop_assert_eq!(x.p_value, y.p_value);
        prop_assert!((0.0..=1.0).contains(&x.p_value));
    }

    #[test]
    fn identities_hold(x in image(16, 16)) {
        prop_assert!((ssim(&x, &x, None).unwrap() - 1.0).abs() < 1e-10);
        prop_assert_eq!(rmse(&x, &x, None).unwrap(), 0.0);
        prop_assert_eq!(psnr(&x, &x, None, 1.0).unwrap(), f64::INFINITY);
        let m = binarize(&x);
        prop_assert_eq!(hard_dice(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn psnr_log_identity(x in image(12, 12), y in image(12, 12)) {
        let e = rmse(&x, &y, None).unwrap();
        let mse = e * e;
        let p = psnr(&x, &y, None, 1.0).unwrap();
        prop_assert!((p - (-10.0 * mse.log10())).abs() < 1e-10);
        prop_assert!((psnr(&x, &y, None, 2.0).unwrap() - p - 20.0 * 2f64.log10()).abs() < 1e-10);
    }

    #[test]
    fn masked_metrics_equal_cropped_metrics(
        x in image(24, 24),
        y in image(24, 24),
        r0 in 0usize..6,
        c0 in 0usize..6,
    ) {
        let (h, w) = (16, 14);
        let (cx, cy) = (crop(&x, r0, c0, h, w), crop(&y, r0, c0, h, w));
        let m = rect(24, 24, r0, c0, h, w);
        prop_assert!((rmse(&x, &y, Some(&m)).unwrap() - rmse(&cx, &cy, None).unwrap()).abs() < 1e-12);
        // SSIM windows fully inside the crop are those centred 5 pixels in.
        let half = SSIM_WINDOW / 2;
        let centres = rect(24, 24, r0 + half, c0 + half, h - 2 * half, w - 2 * half);
        prop_assert!((ssim(&x, &y, Some(&centres)).unwrap() - ssim(&cx, &cy, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in image(8, 8), b in image(8, 8)) {
        let (ma, mb) = (binarize(&a), binarize(&b));
        let d = hard_dice(&ma, &mb).unwrap();
        prop_assert_eq!(d, hard_dice(&mb, &ma).unwrap());
        prop_assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn wilcoxon_large_sample_uses_normal_approximation() {
    let a: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + 1.0).collect();
    let b: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + if i % 5 == 0 { 1.05 } else { 0.9 }).collect();
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!r.exact);
    assert_eq!(r.n, 40);
    assert!(r.p_value < 0.01, "{r:?}");
}

#[test]
fn gradient_maps_cover_four_losses() {
    let cfg = DatasetConfig { size: 32, ..DatasetConfig::default() };
    let case = generate_case(&cfg, 0).unwrap();
    let g = build_denoiser::<f32>(&[8, 1], 3, 1).unwrap();
    let mut seg = build_segmenter::<f32>(SegmenterKind::UnetSmall, 2);
    seg.freeze();
    let f = build_perceptual_net::<f32>(3);
    let maps = gradient_maps(&g, &seg, &f, &case).unwrap();
    let losses: Vec<GradLoss> = maps.iter().map(|m| m.loss).collect();
    assert_eq!(losses, GradLoss::ALL.to_vec());
    for m in &maps {
        assert!((0.0..=1.0).contains(&m.roi_mass_fraction));
        assert!(m.map.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.map.data.iter().copied().fold(0.0, f64::max), 1.0, "{}", m.loss);
    }
    // |∂ mean|d| / ∂x̂| is constant wherever d ≠ 0.
    let l1 = maps.iter().find(|m| m.loss == GradLoss::L1).unwrap();
    assert!(l1.map.data.iter().all(|&v| v == 0.0 || v == 1.0));
    assert!(seg.params().iter().all(|p| p.grad.is_none()));
}

#[test]
fn grad_map_mass_fraction_oracle() {
    let grad = Image::new(2, 2, vec![1.0, -3.0, 0.0, 4.0]).unwrap();
    let mask = Mask::new(2, 2, vec![false, true, false, true]).unwrap();
    let m = grad_map_from(GradLoss::Mse, &grad, &mask);
    assert!((m.roi_mass_fraction - 7.0 / 8.0).abs() < 1e-15);
    assert_eq!(m.map.data, vec![0.25, 0.75, 0.0, 1.0]);
}
