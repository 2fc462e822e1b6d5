use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};
use tomocvae_core::engine::{estimate_stats, PosteriorSummary};
use tomocvae_core::metrics::{
    compare_methods, cross_section, hpd_band, hpd_band_from, inverse_normal_cdf, psnr, ssim, HpdVariant,
    ReconstructionSet,
};
use tomocvae_core::Image;

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
}

/// Direct 2-D window SSIM, written independently of the separable filter.
fn ssim_direct(a: &Image, b: &Image, range: f64) -> f64 {
    let (h, w) = a.shape();
    let mut k = [[0.0; 11]; 11];
    let mut s = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
            s += *v;
        }
    }
    let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
    let mut total = 0.0;
    let mut n = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = k[i][j] / s;
                    let (x, y) = (a.get(r + i, c + j), b.get(r + i, c + j));
                    ma += g * x;
                    mb += g * y;
                    aa += g * x * x;
                    bb += g * y * y;
                    ab += g * x * y;
                }
            }
            let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn psnr_closed_forms() {
    let x = random_image(4, 4, 1);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    let shifted = x.map(|v| v + 2.0);
    assert!(psnr(&shifted, &x, 2.0).unwrap().abs() < 1e-12);
    assert!(psnr(&x, &Image::zeros(3, 3), 1.0).is_err());
    assert!(psnr(&x, &x, 0.0).is_err());
}

#[test]
fn psnr_four_pixel_hand_calculation() {
    let x = Image::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let r = Image::from_vec(2, 2, vec![1.5, 2.0, 2.0, 4.0]).unwrap();
    // MSE = (0.25 + 0 + 1 + 0) / 4 = 0.3125; 10 log10(16 / 0.3125) = 10 log10(51.2).
    let want = 17.092699609758306;
    assert!((psnr(&x, &r, 4.0).unwrap() - want).abs() < 1e-10);
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let truth = random_image(16, 16, 2);
    let noise = random_image(16, 16, 3).map(|v| v - 0.5);
    let mut prev = f64::INFINITY;
    for amp in [0.01, 0.05, 0.1, 0.5, 1.0] {
        let x = truth.zip_map(&noise, |t, n| t + amp * n).unwrap();
        let p = psnr(&x, &truth, 1.0).unwrap();
        assert!(p < prev);
        prev = p;
    }
}

#[test]
fn ssim_matches_direct_window_computation() {
    let a = random_image(20, 17, 4);
    let b = a.zip_map(&random_image(20, 17, 5), |x, y| 0.7 * x + 0.3 * y).unwrap();
    let got = ssim(&a, &b, 1.0).unwrap();
    assert!((got - ssim_direct(&a, &b, 1.0)).abs() < 1e-12);
}

#[test]
fn ssim_identity_and_symmetry() {
    let a = random_image(16, 16, 6);
    let b = random_image(16, 16, 7);
    assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((ssim(&a, &b, 1.0).unwrap() - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    assert!(ssim(&Image::zeros(10, 20), &Image::zeros(10, 20), 1.0).is_err());
}

#[test]
fn ssim_of_inverted_binary_image_is_low() {
    let x = Image::from_fn(32, 32, |r, c| if (r / 4 + c / 4) % 2 == 0 { 1.0 } else { 0.0 });
    let inv = x.map(|v| 1.0 - v);
    let s = ssim(&x, &inv, 1.0).unwrap();
    assert!(s < 0.2, "{s}");
}

#[test]
fn ssim_of_constants_is_luminance_term() {
    let (a, b, range) = (0.3, 0.8, 1.0);
    let c1 = (0.01f64 * range).powi(2);
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim(&Image::filled(12, 12, a), &Image::filled(12, 12, b), range).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn inverse_cdf_matches_reference() {
    assert!((inverse_normal_cdf(0.975).unwrap() - 1.959964).abs() < 1e-6);
    let n = Normal::new(0.0, 1.0).unwrap();
    for p in [1e-300, 1e-10, 0.001, 0.02, 0.1, 0.3, 0.5, 0.7, 0.95, 0.99, 0.999999] {
        let want = n.inverse_cdf(p);
        let got = inverse_normal_cdf(p).unwrap();
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{p}: {got} vs {want}");
    }
    for p in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(inverse_normal_cdf(p).is_err());
    }
}

fn summary(mean: Image, variance: Image, beta: f64) -> PosteriorSummary {
    PosteriorSummary {
        samples: vec![mean.clone()],
        mean,
        variance,
        beta,
    }
}

#[test]
fn floor_variance_gives_zero_width_background_band() {
    let mean = random_image(8, 8, 8);
    let s = summary(mean.clone(), Image::filled(8, 8, 0.01), 0.01);
    let band = hpd_band(&s, 3, 0.95, HpdVariant::WithoutBackground).unwrap();
    assert!(band.widths().iter().all(|w| *w == 0.0));
    assert_eq!(band.mean, cross_section(&mean, 3).unwrap());
    let full = hpd_band(&s, 3, 0.95, HpdVariant::Full).unwrap();
    for w in full.widths() {
        assert!((w - 2.0 * 1.959963984540054 * 0.1).abs() < 1e-12);
    }
}

#[test]
fn band_errors() {
    let s = summary(Image::zeros(4, 4), Image::filled(4, 4, 1.0), 0.1);
    assert!(hpd_band(&s, 4, 0.95, HpdVariant::Full).is_err());
    assert!(hpd_band(&s, 0, 1.0, HpdVariant::Full).is_err());
    assert!(hpd_band(&s, 0, 0.0, HpdVariant::Full).is_err());
    assert!("median".parse::<HpdVariant>().is_err());
    assert_eq!("full".parse::<HpdVariant>().unwrap(), HpdVariant::Full);
    assert_eq!("without-background".parse::<HpdVariant>().unwrap(), HpdVariant::WithoutBackground);
}

#[test]
fn bands_at_figure_rows_are_reproducible() {
    let samples: Vec<Image> = (0..5).map(|s| random_image(128, 128, 20 + s)).collect();
    let (mean, var) = estimate_stats(&samples, 5e-3).unwrap();
    for row in [10, 100] {
        let a = hpd_band_from(&mean, &var, 5e-3, row, 0.95, HpdVariant::Full).unwrap();
        let b = hpd_band_from(&mean, &var, 5e-3, row, 0.95, HpdVariant::Full).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mean.len(), 128);
    }
}

proptest! {
    #[test]
    fn band_properties(
        means in proptest::collection::vec(-5.0f64..5.0, 6),
        excess in proptest::collection::vec(0.0f64..3.0, 6),
        beta in 1e-4f64..1.0,
        level in 0.05f64..0.99,
    ) {
        let mean = Image::from_vec(1, 6, means).unwrap();
        let var = Image::from_vec(1, 6, excess.iter().map(|e| beta + e).collect()).unwrap();
        let full = hpd_band_from(&mean, &var, beta, 0, level, HpdVariant::Full).unwrap();
        let bg = hpd_band_from(&mean, &var, beta, 0, level, HpdVariant::WithoutBackground).unwrap();
        let quad = hpd_band_from(&mean, &var.scaled(4.0), beta, 0, level, HpdVariant::Full).unwrap();
        for i in 0..6 {
            prop_assert!(full.lower[i] <= full.mean[i] && full.mean[i] <= full.upper[i]);
            prop_assert!(bg.lower[i] <= bg.mean[i] && bg.mean[i] <= bg.upper[i]);
            prop_assert!(bg.widths()[i] <= full.widths()[i]);
            let ratio = quad.widths()[i] / full.widths()[i];
            prop_assert!((ratio - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_bounded_and_symmetric(seed in 0u64..1000) {
        let a = random_image(12, 13, seed);
        let b = random_image(12, 13, seed + 1);
        let s = ssim(&a, &b, 1.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a, 1.0).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn comparison_report_rows_and_aggregates() {
    let phantoms: Vec<Image> = (0..3).map(|s| random_image(12, 12, 40 + s).map(|v| v + 0.1)).collect();
    let at = |level: f64, noise: f64| -> Vec<Image> {
        phantoms
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = p.scaled(level / p.max());
                t.zip_map(&random_image(12, 12, 90 + i as u64), |a, n| a + noise * level * (n - 0.5)).unwrap()
            })
            .collect()
    };
    let sets = vec![
        ReconstructionSet { method: "a".into(), count_level: 1e2, images: at(1e2, 0.1) },
        ReconstructionSet { method: "b".into(), count_level: 1e2, images: at(1e2, 0.3) },
        ReconstructionSet { method: "a".into(), count_level: 1e4, images: at(1e4, 0.1) },
    ];
    let report = compare_methods(&phantoms, &sets).unwrap();
    assert_eq!(report.rows.len(), 9);
    let agg = report.aggregates();
    assert_eq!(agg.len(), 3);
    assert!(agg[0].mean_psnr > agg[1].mean_psnr);
    assert!(agg[0].mean_ssim > agg[1].mean_ssim);
    // Same relative noise at both levels gives the same scores.
    assert!((agg[0].mean_psnr - agg[2].mean_psnr).abs() < 1e-9);
    let truth = phantoms[1].scaled(1e2 / phantoms[1].max());
    assert_eq!(report.rows[1].psnr, psnr(&sets[0].images[1], &truth, 1e2).unwrap());
    assert_eq!(report, compare_methods(&phantoms, &sets).unwrap());

    let single = compare_methods(&phantoms[..1], &[ReconstructionSet {
        method: "a".into(),
        count_level: 1e2,
        images: at(1e2, 0.1)[..1].to_vec(),
    }])
    .unwrap();
    assert_eq!(single.rows.len(), 1);
    let missing = vec![ReconstructionSet { method: "a".into(), count_level: 1e2, images: vec![] }];
    assert!(compare_methods(&phantoms, &missing).is_err());
}
