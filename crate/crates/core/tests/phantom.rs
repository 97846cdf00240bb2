//! Simulator properties: phantom invariants, projector linearity and
//! area oracle, dose noise, reconstruction fidelity, dataset determinism.

use std::fs;

use proptest::prelude::*;
use tod_core::evaluation::{psnr, rmse};
use tod_core::phantom::*;

const SIZE: usize = 64;

fn body(img: &Image) -> Mask {
    Mask::from_image(img, 0.15)
}

#[test]
fn hundred_seeds_satisfy_phantom_invariants() {
    for seed in 0..100u64 {
        let p = generate_phantom(seed * 7919 + 3, SIZE).unwrap();
        let f = p.organ_mask.fraction();
        assert!((MIN_MASK_FRACTION..=MAX_MASK_FRACTION).contains(&f), "seed {seed}: {f}");
        assert!(p.ndct.data.iter().all(|v| (0.0..=1.0).contains(v)), "seed {seed}");
    }
}

/// Centred disk of radius `r` pixels and value `mu`, 8×8 supersampled.
fn disk(size: usize, r: f64, mu: f64) -> Image {
    let c = (size as f64 - 1.0) / 2.0;
    let mut data = vec![0.0; size * size];
    for row in 0..size {
        for col in 0..size {
            let mut hit = 0;
            for i in 0..8 {
                for j in 0..8 {
                    let y = row as f64 - 0.5 + (i as f64 + 0.5) / 8.0 - c;
                    let x = col as f64 - 0.5 + (j as f64 + 0.5) / 8.0 - c;
                    hit += usize::from(x * x + y * y <= r * r);
                }
            }
            data[row * size + col] = mu * hit as f64 / 64.0;
        }
    }
    Image::new(size, size, data).unwrap()
}

#[test]
fn disk_projections_integrate_to_area_times_attenuation() {
    let (r, mu) = (20.0, 0.7);
    let img = disk(SIZE, r, mu);
    let sino = radon(&img, 180, min_bins(SIZE, SIZE)).unwrap();
    let want = std::f64::consts::PI * r * r * mu;
    for a in 0..sino.n_angles() {
        let got: f64 = sino.projection(a).iter().sum::<f64>() * sino.spacing;
        assert!((got - want).abs() / want < 0.01, "angle {a}: {got} vs {want}");
    }
}

#[test]
fn radon_homogeneity_example() {
    let p = generate_phantom(5, SIZE).unwrap();
    let bins = min_bins(SIZE, SIZE);
    let s1 = radon(&p.ndct, 16, bins).unwrap();
    let s2 = radon(&p.ndct.scaled(2.5), 16, bins).unwrap();
    for (a, b) in s1.values.iter().zip(&s2.values) {
        assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

fn small_image() -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..1.0f64, 16 * 16).prop_map(|d| Image::new(16, 16, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn radon_is_linear(a in small_image(), b in small_image(), k in -3.0..3.0f64) {
        let bins = min_bins(16, 16);
        let ra = radon(&a, 8, bins).unwrap();
        let rb = radon(&b, 8, bins).unwrap();
        let sum = Image::new(16, 16, a.data.iter().zip(&b.data).map(|(x, y)| k * x + y).collect()).unwrap();
        let rs = radon(&sum, 8, bins).unwrap();
        for ((x, y), s) in ra.values.iter().zip(&rb.values).zip(&rs.values) {
            prop_assert!((k * x + y - s).abs() < 1e-9);
        }
    }

    #[test]
    fn noise_is_deterministic_in_seed(seed in any::<u64>()) {
        let p = generate_phantom(1, 32).unwrap();
        let s = radon(&p.ndct, 8, min_bins(32, 32)).unwrap().scaled(0.0625);
        prop_assert_eq!(apply_dose_noise(&s, 1e3, seed).unwrap(), apply_dose_noise(&s, 1e3, seed).unwrap());
    }
}

fn clean_sinogram() -> Sinogram {
    let p = generate_phantom(11, SIZE).unwrap();
    radon(&p.ndct, 90, min_bins(SIZE, SIZE)).unwrap().scaled(0.0625)
}

#[test]
fn high_dose_limit_recovers_clean_integrals() {
    let clean = clean_sinogram();
    let noisy = apply_dose_noise(&clean, 1e12, 3).unwrap();
    for (c, n) in clean.values.iter().zip(&noisy.values) {
        if *c > 0.05 {
            assert!((n - c).abs() / c < 1e-3, "{n} vs {c}");
        } else {
            assert!((n - c).abs() < 1e-4, "{n} vs {c}");
        }
    }
}

fn noise_variance(clean: &Sinogram, i0: f64, trials: u64) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for t in 0..trials {
        let noisy = apply_dose_noise(clean, i0, 1000 + t).unwrap();
        for (c, x) in clean.values.iter().zip(&noisy.values) {
            acc += (x - c) * (x - c);
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn noise_variance_falls_with_dose() {
    let clean = clean_sinogram();
    let v: Vec<f64> = [1e3, 1e4, 1e5].iter().map(|&d| noise_variance(&clean, d, 20)).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
}

#[test]
fn noiseless_round_trip_inside_body() {
    for seed in [0u64, 1, 2, 3] {
        let p = generate_phantom(seed, SIZE).unwrap();
        let sino = radon(&p.ndct, 180, min_bins(SIZE, SIZE)).unwrap();
        let rec = fbp_reconstruct(&sino, SIZE, RampWindow::RamLak).unwrap();
        let e = rmse(&rec, &p.ndct, Some(&body(&p.ndct))).unwrap();
        assert!(e < 0.05, "seed {seed}: {e}");
    }
}

#[test]
fn zero_sinogram_reconstructs_to_zero() {
    let rec = fbp_reconstruct(&Sinogram::zeros(180, min_bins(SIZE, SIZE)), SIZE, RampWindow::RamLak).unwrap();
    assert!(rec.data.iter().all(|&v| v == 0.0));
}

#[test]
fn lower_dose_reconstructs_worse() {
    let p = generate_phantom(21, SIZE).unwrap();
    let dose = |photons_per_ray| DoseConfig { photons_per_ray, ..DoseConfig::default() };
    let low = simulate_ldct(&p.ndct, &dose(1e3), 4).unwrap();
    let high = simulate_ldct(&p.ndct, &dose(1e5), 4).unwrap();
    assert!(rmse(&low, &p.ndct, None).unwrap() > rmse(&high, &p.ndct, None).unwrap());
}

fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig { size: 32, n_train: 4, n_val: 2, n_test: 3, seed, ..DatasetConfig::default() }
}

fn checksums(dir: &std::path::Path, split: &DatasetSplit) -> Vec<Vec<u8>> {
    let mut out = vec![fs::read(dir.join(MANIFEST_FILE)).unwrap()];
    for e in split.entries() {
        for p in [&e.ndct, &e.ldct, &e.mask] {
            out.push(fs::read(dir.join(p)).unwrap());
        }
    }
    out
}

#[test]
fn dataset_is_reproducible_and_disjoint() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_config(9);
    let sa = build_dataset(&cfg, a.path()).unwrap();
    let sb = build_dataset(&cfg, b.path()).unwrap();
    assert_eq!(checksums(a.path(), &sa), checksums(b.path(), &sb));
    assert_eq!((sa.train.len(), sa.val.len(), sa.test.len()), (4, 2, 3));
    assert!((sa.ratios.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut ids: Vec<&str> = sa.entries().map(|e| e.case_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), cfg.total());

    let read = read_manifest(&a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read.train, sa.train);
    let loaded = load_dataset(&read).unwrap();
    for c in loaded.train.iter().chain(&loaded.test) {
        assert!(c.ndct.data.iter().chain(&c.ldct.data).all(|v| (0.0..=1.0).contains(v)));
    }

    let c = tempfile::tempdir().unwrap();
    let sc = build_dataset(&small_config(10), c.path()).unwrap();
    assert_ne!(checksums(a.path(), &sa), checksums(c.path(), &sc));
}

#[test]
fn default_dose_psnr_band() {
    let cfg = DatasetConfig::default();
    let start = cfg.n_train + cfg.n_val;
    let mut acc = 0.0;
    for i in start..cfg.total() {
        let c = generate_case(&cfg, i).unwrap();
        acc += psnr(&c.ldct, &c.ndct, None, 1.0).unwrap();
    }
    let mean = acc / cfg.n_test as f64;
    eprintln!("mean LDCT PSNR {mean:.3} dB");
    assert!((15.0..35.0).contains(&mean), "{mean}");
}
