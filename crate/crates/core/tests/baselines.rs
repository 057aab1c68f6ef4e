use cpn_core::baselines::{
    compcode_distance, compcode_encode, region_hist_distance, CodingBank, CombinedMatcher, CompCodeConfig,
    CompCodeMatcher, Matcher, OrientationCodeMap, RegionHistMatcher, RegionHistogram,
};
use cpn_core::dataset::{generate_synthetic, SyntheticPalmSpec};
use cpn_core::gabor::Bend;
use cpn_core::Raster;
use proptest::prelude::*;

/// Dark line of half-width `half` through the image centre along
/// `(−sin θ, cos θ)` on a bright background.
fn dark_line(n: usize, theta: f64, half: f64) -> Raster {
    let c = (n as f64 - 1.0) / 2.0;
    Raster::from_fn(n, n, |x, y| {
        // Distance from the line is the projection on its normal (cos θ, sin θ).
        let d = (x as f64 - c) * theta.cos() + (y as f64 - c) * theta.sin();
        if d.abs() <= half {
            0.0
        } else {
            1.0
        }
    })
}

#[test]
fn dark_line_gets_its_own_orientation_code() {
    let cfg = CompCodeConfig::default();
    let bank = CodingBank::straight(&cfg).unwrap();
    let n = 64;
    for k in 0..cfg.orientations {
        let theta = std::f64::consts::PI * k as f64 / cfg.orientations as f64;
        let img = dark_line(n, theta, 1.5);
        let map = compcode_encode(&img, &bank).unwrap();
        let (mut on, mut hit) = (0, 0);
        for y in 12..n - 12 {
            for x in 12..n - 12 {
                if img.get(x, y) == 0.0 {
                    on += 1;
                    hit += usize::from(map.get(x, y) as usize == k);
                }
            }
        }
        assert!(on > 50);
        assert!(hit as f64 > 0.9 * on as f64, "orientation {k}: {hit}/{on}");
    }
}

#[test]
fn constant_image_interior_codes_are_zero() {
    let bank = CodingBank::straight(&CompCodeConfig::default()).unwrap();
    let map = compcode_encode(&Raster::filled(48, 48, 3.0), &bank).unwrap();
    for y in 9..39 {
        for x in 9..39 {
            assert_eq!(map.get(x, y), 0);
        }
    }
}

fn angular(a: u8, b: u8, k: u8) -> f64 {
    let d = if a > b { a - b } else { b - a };
    let d = d.min(k - d) as f64;
    d / (k / 2) as f64
}

proptest! {
    #[test]
    fn compcode_distance_matches_brute_force(
        k in 2u8..9,
        raw in proptest::collection::vec((0u8..255, 0u8..255, any::<bool>()), 20),
    ) {
        let a: Vec<u8> = raw.iter().map(|t| t.0 % k).collect();
        let b: Vec<u8> = raw.iter().map(|t| t.1 % k).collect();
        let mut mask: Vec<bool> = raw.iter().map(|t| t.2).collect();
        mask[0] = true;
        let ma = OrientationCodeMap::new(5, 4, k, a.clone()).unwrap().with_mask(mask.clone()).unwrap();
        let mb = OrientationCodeMap::new(5, 4, k, b.clone()).unwrap();
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..20 {
            if mask[i] {
                total += angular(a[i], b[i], k);
                count += 1.0;
            }
        }
        let got = compcode_distance(&ma, &mb).unwrap();
        prop_assert!((got - total / count).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
        prop_assert_eq!(got, compcode_distance(&mb, &ma).unwrap());
    }

    #[test]
    fn region_hist_distance_matches_brute_force(
        codes in proptest::collection::vec((0u8..6, 0u8..6), 81),
    ) {
        let a: Vec<u8> = codes.iter().map(|t| t.0).collect();
        let b: Vec<u8> = codes.iter().map(|t| t.1).collect();
        let ma = OrientationCodeMap::new(9, 9, 6, a.clone()).unwrap();
        let mb = OrientationCodeMap::new(9, 9, 6, b.clone()).unwrap();
        let hist = |c: &[u8], r: usize, q: usize| {
            let mut h = [0.0f64; 6];
            for y in 3 * r..3 * r + 3 {
                for x in 3 * q..3 * q + 3 {
                    h[c[y * 9 + x] as usize] += 1.0 / 9.0;
                }
            }
            h
        };
        let mut want = 0.0;
        for r in 0..3 {
            for q in 0..3 {
                let (p, s) = (hist(&a, r, q), hist(&b, r, q));
                for i in 0..6 {
                    if p[i] + s[i] > 0.0 {
                        want += 0.5 * (p[i] - s[i]).powi(2) / (p[i] + s[i]);
                    }
                }
            }
        }
        want /= 9.0;
        let got = region_hist_distance(&ma, &mb, (3, 3)).unwrap();
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
    }
}

#[test]
fn maximal_offset_codes_are_at_distance_one() {
    let a = OrientationCodeMap::new(6, 1, 6, vec![0, 1, 2, 3, 4, 5]).unwrap();
    let b = OrientationCodeMap::new(6, 1, 6, vec![3, 4, 5, 0, 1, 2]).unwrap();
    assert_eq!(compcode_distance(&a, &b).unwrap(), 1.0);
}

#[test]
fn single_bin_disjoint_histograms_are_at_distance_one() {
    let a = OrientationCodeMap::new(4, 4, 6, vec![1; 16]).unwrap();
    let b = OrientationCodeMap::new(4, 4, 6, vec![4; 16]).unwrap();
    let d = region_hist_distance(&a, &b, (2, 2)).unwrap();
    assert!((d - 1.0).abs() < 1e-9);
    let h = RegionHistogram::from_codes(&a, (2, 2)).unwrap();
    assert_eq!(h.cell(1, 0)[1], 1.0);
}

fn translate(img: &Raster, dx: f64, dy: f64) -> Raster {
    Raster::from_fn(img.width(), img.height(), |x, y| {
        img.sample_clamped(x as f64 - dx, y as f64 - dy)
    })
}

#[test]
fn region_histograms_tolerate_translation_better_than_codes() {
    let samples = generate_synthetic(&SyntheticPalmSpec::default()).unwrap();
    let bank = CodingBank::straight(&CompCodeConfig::default()).unwrap();
    let cc = CompCodeMatcher::new(bank.clone());
    let rh = RegionHistMatcher::new(bank);
    let mut ratios = (0.0, 0.0);
    for i in 0..5 {
        let a = &samples[i * 6].image;
        let other = &samples[(i + 1) * 6].image;
        let shifted = translate(a, 3.0, 2.0);
        let rel = |m: &dyn Fn(&Raster, &Raster) -> f64| m(a, &shifted) / m(a, other);
        ratios.0 += rel(&|x, y| cc.compare(x, y).unwrap());
        ratios.1 += rel(&|x, y| rh.compare(x, y).unwrap());
    }
    assert!(ratios.1 < ratios.0, "region-hist {} vs compcode {}", ratios.1, ratios.0);
}

#[test]
fn combined_matcher_averages_its_parts() {
    let samples = generate_synthetic(&SyntheticPalmSpec {
        n_identities: 2,
        ..SyntheticPalmSpec::default()
    })
    .unwrap();
    let cfg = CompCodeConfig::default();
    let straight = CompCodeMatcher::new(CodingBank::straight(&cfg).unwrap());
    let curved = CompCodeMatcher {
        label: "compcode-curved".into(),
        ..CompCodeMatcher::new(CodingBank::curved(&cfg, Bend::Positive).unwrap())
    };
    let combined = CombinedMatcher {
        straight: straight.clone(),
        curved: curved.clone(),
    };
    let (a, b) = (&samples[0].image, &samples[7].image);
    let want = 0.5 * (straight.compare(a, b).unwrap() + curved.compare(a, b).unwrap());
    assert!((combined.compare(a, b).unwrap() - want).abs() < 1e-15);
    assert_eq!(combined.name(), "compcode+compcode-curved");
}

#[test]
fn curved_bank_codes_differ_from_straight() {
    let samples = generate_synthetic(&SyntheticPalmSpec {
        n_identities: 1,
        ..SyntheticPalmSpec::default()
    })
    .unwrap();
    let cfg = CompCodeConfig::default();
    let s = compcode_encode(&samples[0].image, &CodingBank::straight(&cfg).unwrap()).unwrap();
    let c = compcode_encode(&samples[0].image, &CodingBank::curved(&cfg, Bend::Positive).unwrap()).unwrap();
    assert_ne!(s.codes(), c.codes());
}
