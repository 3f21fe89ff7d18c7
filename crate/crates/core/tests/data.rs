use proptest::prelude::*;
use sfda_core::data::*;
use sfda_core::SfdaError;

fn small(mode: SplitMode, k: usize, seed: u64) -> Benchmark {
    make_split(
        mode,
        k,
        SplitSizes { train: 60, eval: 20 },
        seed,
        &DomainSpec::default_source(),
        &DomainSpec::default_target(),
        32,
    )
    .unwrap()
}

fn label_set(ds: &Dataset) -> Vec<usize> {
    let mut v = ds.labels();
    v.sort_unstable();
    v.dedup();
    v
}

#[test]
fn class_histogram_is_uniform() {
    let k = 4;
    let samples = generate_with(&DomainSpec::default_source(), 10_000, k, 8, 3, DomainTag::Source).unwrap();
    let mut counts = vec![0usize; k];
    for s in &samples {
        counts[s.label] += 1;
    }
    for c in counts {
        let frac = c as f64 / 10_000.0;
        assert!((frac - 0.25).abs() <= 0.02, "{frac}");
    }
}

#[test]
fn closed_split_shares_every_class() {
    let b = small(SplitMode::Closed, 4, 0);
    for ds in [&b.source.train, &b.target.train] {
        assert_eq!(label_set(ds), vec![0, 1, 2, 3]);
    }
}

#[test]
fn partial_split_keeps_the_ratio() {
    assert_eq!(partial_target_classes(8), 4);
    let b = small(SplitMode::Partial, 8, 1);
    let target = label_set(&b.target.train);
    assert_eq!(target.len(), 4);
    let source = label_set(&b.source.train);
    assert!(target.iter().all(|c| source.contains(c)));
    assert_eq!(b.target.train.num_classes, 8);
}

#[test]
fn open_split_adds_unseen_classes() {
    let b = small(SplitMode::Open, 6, 2);
    let source = label_set(&b.source.train);
    let unseen: Vec<usize> = label_set(&b.target.train)
        .into_iter()
        .filter(|c| !source.contains(c))
        .collect();
    assert_eq!(unseen, vec![6, 7]);
    assert!(unseen.iter().all(|&c| b.target.train.is_unknown(c)));
}

#[test]
fn split_errors() {
    assert!(matches!("mixed".parse::<SplitMode>(), Err(SfdaError::Config(_))));
    assert!(matches!(split_spec(SplitMode::Open, 3), Err(SfdaError::Config(_))));
    assert!(matches!(split_spec(SplitMode::Closed, 13), Err(SfdaError::Config(_))));
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let spec = DomainSpec::default_target();
    let a = generate(&spec, 20, 4, 9).unwrap();
    assert_eq!(a, generate(&spec, 20, 4, 9).unwrap());
    assert_ne!(a, generate(&spec, 20, 4, 10).unwrap());
    // a prefix does not depend on how many samples follow it
    assert_eq!(&generate(&spec, 35, 4, 9).unwrap()[..20], &a[..]);
}

#[test]
fn default_domains_differ() {
    assert_ne!(DomainSpec::default_source(), DomainSpec::default_target());
}

#[test]
fn shape_geometry_does_not_depend_on_the_domain() {
    // same generator per class in both domains: the mean object area per class agrees
    let area = |spec: &DomainSpec| {
        let mut sum = [0.0; 4];
        let mut n = [0.0; 4];
        for s in generate(spec, 1600, 4, 5).unwrap() {
            sum[s.label] += s.mask_fraction();
            n[s.label] += 1.0;
        }
        (0..4).map(|k| sum[k] / n[k]).collect::<Vec<f64>>()
    };
    let (src, tgt) = (area(&DomainSpec::default_source()), area(&DomainSpec::default_target()));
    for k in 0..4 {
        assert!((src[k] - tgt[k]).abs() < 0.02, "class {k}: {} vs {}", src[k], tgt[k]);
    }
}

#[test]
fn object_and_background_colors_are_separated() {
    for spec in [DomainSpec::default_source(), DomainSpec::default_target()] {
        for s in generate(&spec, 50, 4, 4).unwrap() {
            let side = 32;
            let (mut obj, mut bg) = ([0.0; 3], [0.0; 3]);
            let (mut no, mut nb) = (0.0, 0.0);
            for p in 0..side * side {
                let inside = s.mask[p] == 1;
                for c in 0..3 {
                    let v = s.image[c * side * side + p] as f64;
                    if inside {
                        obj[c] += v;
                    } else {
                        bg[c] += v;
                    }
                }
                if inside {
                    no += 1.0;
                } else {
                    nb += 1.0;
                }
            }
            let gap = (0..3).map(|c| (obj[c] / no - bg[c] / nb).abs()).fold(0.0, f64::max);
            // clutter blobs darken the background mean, so only half the configured contrast is asserted
            assert!(gap >= spec.min_contrast * 0.5, "{} gap {gap}", spec.name);
        }
    }
}

#[test]
fn round_trip_is_bitwise() {
    let b = small(SplitMode::Open, 4, 7);
    let dir = tempfile::tempdir().unwrap();
    save_benchmark(dir.path(), &b).unwrap();
    let back = load_benchmark(dir.path()).unwrap();
    assert_eq!(back, b);
    for (x, y) in back.target.eval.samples.iter().zip(&b.target.eval.samples) {
        assert!(x.image.iter().zip(&y.image).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn truncated_blob_names_expected_and_actual_sizes() {
    let b = small(SplitMode::Closed, 4, 0);
    let bytes = encode_dataset(&b.source.eval);
    let cut = &bytes[..bytes.len() - 10];
    match decode_dataset(cut) {
        Err(SfdaError::Format { detail, offset }) => {
            let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
            let payload = bytes.len() - 20 - mlen;
            assert_eq!(offset, 20 + mlen);
            assert!(detail.contains(&format!("expected {payload}")), "{detail}");
            assert!(detail.contains(&format!("found {}", payload - 10)), "{detail}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn corrupted_payload_fails_the_hash() {
    let b = small(SplitMode::Closed, 4, 0);
    let mut bytes = encode_dataset(&b.source.eval);
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    match decode_dataset(&bytes) {
        Err(SfdaError::Format { detail, .. }) => assert!(detail.contains("hash"), "{detail}"),
        other => panic!("expected a hash mismatch, got {other:?}"),
    }
}

#[test]
fn header_errors() {
    assert!(matches!(
        decode_dataset(b"SFDA"),
        Err(SfdaError::Format { offset: 0, .. })
    ));
    assert!(matches!(
        decode_dataset(&[0u8; 32]),
        Err(SfdaError::Format { offset: 0, .. })
    ));
    let mut bytes = encode_dataset(&small(SplitMode::Closed, 4, 0).source.eval);
    bytes[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(matches!(
        decode_dataset(&bytes),
        Err(SfdaError::Format { offset: 12, .. })
    ));
}

#[test]
fn mismatched_partitions_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_benchmark(dir.path(), &small(SplitMode::Closed, 4, 0)).unwrap();
    let other = small(SplitMode::Closed, 5, 0);
    save_dataset(&dir.path().join(BENCHMARK_FILES[3]), &other.target.eval).unwrap();
    assert!(matches!(load_benchmark(dir.path()), Err(SfdaError::Manifest(_))));
    std::fs::remove_file(dir.path().join(BENCHMARK_FILES[1])).unwrap();
    assert!(matches!(load_benchmark(dir.path()), Err(SfdaError::Io(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn samples_satisfy_their_invariants(seed in 0u64..100_000, k in 2usize..12) {
        for spec in [DomainSpec::default_source(), DomainSpec::default_target()] {
            for s in generate(&spec, 4, k, seed).unwrap() {
                prop_assert!(s.label < k);
                prop_assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let f = s.mask_fraction();
                prop_assert!((0.05..=0.60).contains(&f), "mask fraction {}", f);
            }
        }
    }
}
