use cpn_core::dataset::{
    generate_synthetic, manifest_to_string, parse_manifest, split_dataset, split_identities,
    write_corpus, load_samples, Jitter, ManifestRow, Side, SplitPolicy, SplitUnit, Stage,
    SyntheticPalmSpec,
};
use cpn_core::roi::{Keypoints, Point};
use proptest::prelude::*;

fn pixel_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Enrollment gallery against probe images, nearest neighbour on raw pixels.
fn raw_pixel_rank1(spec: &SyntheticPalmSpec) -> f64 {
    let samples = generate_synthetic(spec).unwrap();
    let gallery: Vec<_> = samples.iter().filter(|s| s.stage == Stage::Enrollment).collect();
    let probes: Vec<_> = samples.iter().filter(|s| s.stage == Stage::Probe).collect();
    let mut hits = 0;
    for p in &probes {
        let best = gallery
            .iter()
            .min_by(|a, b| {
                pixel_distance(p.image.data(), a.image.data())
                    .total_cmp(&pixel_distance(p.image.data(), b.image.data()))
            })
            .unwrap();
        if best.identity == p.identity {
            hits += 1;
        }
    }
    hits as f64 / probes.len() as f64
}

#[test]
fn raw_pixel_neighbour_learns_the_default_corpus() {
    let rank1 = raw_pixel_rank1(&SyntheticPalmSpec::default());
    println!("raw-pixel rank-1 = {rank1}");
    assert!(rank1 >= 0.8, "rank-1 {rank1}");
}

#[test]
fn zero_jitter_repeats_each_identity() {
    let spec = SyntheticPalmSpec {
        n_identities: 3,
        images_per_identity: 3,
        jitter: Jitter::NONE,
        noise: 0.0,
        texture: 0.0,
        ..SyntheticPalmSpec::default()
    };
    let s = generate_synthetic(&spec).unwrap();
    for id in 0..3 {
        let imgs: Vec<_> = s.iter().filter(|x| x.identity == id).collect();
        assert!(imgs.windows(2).all(|w| w[0].image == w[1].image));
    }
    assert_ne!(s[0].image, s[3].image);
}

#[test]
fn seed_controls_the_corpus() {
    let a = SyntheticPalmSpec { n_identities: 4, ..SyntheticPalmSpec::default() };
    let b = SyntheticPalmSpec { seed: a.seed + 1, ..a.clone() };
    assert_eq!(generate_synthetic(&a).unwrap(), generate_synthetic(&a).unwrap());
    assert_ne!(generate_synthetic(&a).unwrap(), generate_synthetic(&b).unwrap());
}

#[test]
fn jitter_must_stay_below_separation() {
    let spec = SyntheticPalmSpec {
        jitter: Jitter { translation: 10.0, rotation: 0.0, contrast: 0.0 },
        ..SyntheticPalmSpec::default()
    };
    assert!(generate_synthetic(&spec).is_err());
}

#[test]
fn corpus_round_trips_through_disk() {
    let spec = SyntheticPalmSpec { n_identities: 2, images_per_identity: 4, ..SyntheticPalmSpec::default() };
    let samples = generate_synthetic(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&samples, dir.path()).unwrap();
    let back = load_samples(&manifest).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!((a.identity, a.stage, a.side), (b.identity, b.stage, b.side));
        let err = a.image.data().iter().zip(b.image.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn split_dataset_is_identity_disjoint() {
    let spec = SyntheticPalmSpec { n_identities: 10, images_per_identity: 2, enrollment_per_identity: 1, ..SyntheticPalmSpec::default() };
    let samples = generate_synthetic(&spec).unwrap();
    let (tr, te) = split_dataset(samples, &SplitPolicy::Fraction { train: 0.8, seed: 5 }, SplitUnit::Palm).unwrap();
    assert_eq!((tr.len(), te.len()), (16, 4));
    assert!(tr.iter().all(|a| te.iter().all(|b| a.identity != b.identity)));
}

fn row_strategy() -> impl Strategy<Value = ManifestRow> {
    let pt = (-1e4f64..1e4, -1e4f64..1e4).prop_map(|(x, y)| Point::new(x, y));
    let kp = proptest::option::of((pt.clone(), pt.clone(), pt.clone(), pt).prop_map(|(a, b, c, d)| Keypoints { a, b, c, d }));
    ("[a-z0-9_/]{1,20}\\.png", any::<u32>(), any::<bool>(), any::<bool>(), kp).prop_map(
        |(path, identity, e, l, keypoints)| ManifestRow {
            path,
            identity,
            stage: if e { Stage::Enrollment } else { Stage::Probe },
            side: if l { Side::Left } else { Side::Right },
            keypoints,
        },
    )
}

proptest! {
    #[test]
    fn manifest_rows_round_trip(rows in proptest::collection::vec(row_strategy(), 0..8)) {
        let text = manifest_to_string(&rows).unwrap();
        prop_assert_eq!(parse_manifest(&text).unwrap(), rows.clone());
        prop_assert_eq!(manifest_to_string(&parse_manifest(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn splits_are_disjoint_and_cover(n in 2u32..60, frac in 0.1f64..0.9, seed in any::<u64>(), person in any::<bool>()) {
        let ids: Vec<u32> = (0..n).collect();
        let unit = if person { SplitUnit::Person } else { SplitUnit::Palm };
        if let Ok(s) = split_identities(&ids, &SplitPolicy::Fraction { train: frac, seed }, unit) {
            prop_assert!(s.train.iter().all(|i| !s.test.contains(i)));
            prop_assert_eq!(s.train.len() + s.test.len(), n as usize);
            if person {
                prop_assert!(s.train.iter().all(|&i| !s.test.contains(&(i ^ 1))));
            }
        }
    }
}
