//! Model container round-trips: bit-exact payloads, checksum and version
//! guards, and fit determinism at the byte level.

use geoproto_core::*;
use ndarray::Array2;
use proptest::prelude::*;
use std::path::PathBuf;

fn tmp_path(tag: &str, case: u64) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("geoproto-persist-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(format!("{tag}-{case}.gpro"))
}

fn small_fit_config(k: usize, count: usize, l: usize, m: usize, which: usize) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.graph.k = k;
    cfg.landmarks.count = count;
    cfg.landmarks.selection = if which % 2 == 0 {
        Selection::Random
    } else {
        Selection::Kmeans
    };
    cfg.diffusion.l = l;
    cfg.diffusion.normalization = [
        Normalization::None,
        Normalization::Energy,
        Normalization::Zca,
    ][which % 3];
    cfg.nystrom_mode = if which % 2 == 0 {
        ExtensionMode::Row
    } else {
        ExtensionMode::Paper
    };
    cfg.prototypes.m = m;
    cfg.seed = which as u64;
    cfg.landmarks.seed = which as u64 + 1;
    cfg
}

fn random_feature_set(n_per_class: usize, classes: u32, d: usize, seed: u64) -> FeatureSet {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
    let mut unit = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    let n = n_per_class * classes as usize;
    let features = Array2::from_shape_fn((n, d), |(i, _)| {
        let class_shift = (i / n_per_class) as f64 * 10.0;
        class_shift + unit() * 2.0
    });
    let labels = (0..n).map(|i| 1 + (i / n_per_class) as u32).collect();
    FeatureSet::new(features, labels).unwrap()
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn assert_bundle_bitwise_equal(a: &ModelBundle, b: &ModelBundle) {
    assert_eq!(a.format_version, b.format_version);
    assert_eq!(a.config, b.config);
    let keys: Vec<u32> = a.manifolds.keys().copied().collect();
    assert_eq!(keys, b.manifolds.keys().copied().collect::<Vec<u32>>());
    for class in keys {
        let (ma, mb) = (&a.manifolds[&class], &b.manifolds[&class]);
        assert!(bitwise_eq(
            ma.graph.node_features.as_slice().unwrap(),
            mb.graph.node_features.as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            ma.graph.scales.as_slice().unwrap(),
            mb.graph.scales.as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            ma.graph.degrees.as_slice().unwrap(),
            mb.graph.degrees.as_slice().unwrap()
        ));
        assert_eq!(ma.graph.affinity.rows, mb.graph.affinity.rows);
        assert_eq!(ma.graph.transition.rows, mb.graph.transition.rows);
        assert_eq!(ma.graph.bridge_edges, mb.graph.bridge_edges);
        assert_eq!(
            ma.graph.sigma_floor.to_bits(),
            mb.graph.sigma_floor.to_bits()
        );
        assert!(bitwise_eq(
            ma.basis.eigenvalues.as_slice().unwrap(),
            mb.basis.eigenvalues.as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            ma.basis.eigenvectors.as_slice().unwrap(),
            mb.basis.eigenvectors.as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            ma.landmark_coords.as_slice().unwrap(),
            mb.landmark_coords.as_slice().unwrap()
        ));
        assert_eq!(ma.cfg, mb.cfg);
        assert_eq!(ma.k_oos, mb.k_oos);
        match (&ma.norm_state, &mb.norm_state) {
            (NormState::None, NormState::None) => {}
            (NormState::Energy { scale: sa }, NormState::Energy { scale: sb }) => {
                assert!(bitwise_eq(sa, sb));
            }
            (
                NormState::Zca {
                    mean: la,
                    transform: ta,
                },
                NormState::Zca {
                    mean: lb,
                    transform: tb,
                },
            ) => {
                assert!(bitwise_eq(la.as_slice().unwrap(), lb.as_slice().unwrap()));
                assert!(bitwise_eq(ta.as_slice().unwrap(), tb.as_slice().unwrap()));
            }
            other => panic!("norm state kind changed through round-trip: {other:?}"),
        }
        let (pa, pb) = (
            &a.prototypes.projected[&class],
            &b.prototypes.projected[&class],
        );
        assert_eq!(pa.anchor_indices, pb.anchor_indices);
        assert!(bitwise_eq(
            pa.anchored.as_slice().unwrap(),
            pb.anchored.as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            pa.coords.as_slice().unwrap(),
            pb.coords.as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            a.prototypes.prototypes[&class].as_slice().unwrap(),
            b.prototypes.prototypes[&class].as_slice().unwrap()
        ));
        assert!(bitwise_eq(
            &a.prototypes.head_weights[&class],
            &b.prototypes.head_weights[&class]
        ));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn round_trip_is_bit_exact_for_random_bundles(
        which in 0usize..6,
        classes in 2u32..4,
        n_per_class in 8usize..16,
        d in 2usize..5,
        seed in 0u64..1000,
    ) {
        let fs = random_feature_set(n_per_class, classes, d, seed);
        let cfg = small_fit_config(2, n_per_class, 3, 2, which);
        let (bundle, _) = fit_bundle(&fs, &cfg, None).unwrap();
        let path = tmp_path("roundtrip", seed * 131 + which as u64);
        save_model(&bundle, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_bundle_bitwise_equal(&bundle, &loaded);
        std::fs::remove_file(&path).ok();
    }
}

#[test]
fn identical_fits_produce_identical_files() {
    let fs = random_feature_set(10, 2, 3, 42);
    let cfg = small_fit_config(2, 10, 3, 2, 1);
    let (b1, _) = fit_bundle(&fs, &cfg, None).unwrap();
    let (b2, _) = fit_bundle(&fs, &cfg, None).unwrap();
    let p1 = tmp_path("det", 1);
    let p2 = tmp_path("det", 2);
    save_model(&b1, &p1).unwrap();
    save_model(&b2, &p2).unwrap();
    let bytes1 = std::fs::read(&p1).unwrap();
    let bytes2 = std::fs::read(&p2).unwrap();
    assert_eq!(bytes1, bytes2);
    std::fs::remove_file(&p1).ok();
    std::fs::remove_file(&p2).ok();
}

#[test]
fn wrong_magic_is_a_version_mismatch() {
    let fs = random_feature_set(8, 2, 2, 7);
    let cfg = small_fit_config(2, 8, 2, 1, 0);
    let (bundle, _) = fit_bundle(&fs, &cfg, None).unwrap();
    let path = tmp_path("magic", 0);
    save_model(&bundle, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_model(&path), Err(Error::VersionMismatch(_))));
    std::fs::remove_file(&path).ok();
}

#[test]
fn unsupported_version_is_rejected() {
    let fs = random_feature_set(8, 2, 2, 9);
    let cfg = small_fit_config(2, 8, 2, 1, 0);
    let (bundle, _) = fit_bundle(&fs, &cfg, None).unwrap();
    let path = tmp_path("version", 0);
    save_model(&bundle, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 99; // version little-endian low byte
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_model(&path), Err(Error::VersionMismatch(_))));
    std::fs::remove_file(&path).ok();
}

#[test]
fn flipped_payload_byte_fails_the_checksum() {
    let fs = random_feature_set(8, 2, 2, 11);
    let cfg = small_fit_config(2, 8, 2, 1, 0);
    let (bundle, _) = fit_bundle(&fs, &cfg, None).unwrap();
    let path = tmp_path("crc", 0);
    save_model(&bundle, &path).unwrap();
    let original = std::fs::read(&path).unwrap();
    // Flip bytes at several payload offsets; each must fail the CRC.
    for &offset in &[20usize, original.len() / 2, original.len() - 8] {
        let mut bytes = original.clone();
        bytes[offset] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match load_model(&path) {
            Err(Error::ChecksumFailure { .. }) => {}
            other => panic!("offset {offset}: expected ChecksumFailure, got {other:?}"),
        }
    }
    std::fs::remove_file(&path).ok();
}
