use atdt_core::dataset::{build_dataset, export_split, read_depth_pgm, read_pgm, read_ppm, DatasetConfig, SplitKind};
use atdt_core::scenegen::{generate_scene, render, Class, DomainStyle, GrammarConfig, D_MAX, D_MIN, NUM_CLASSES};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn rendered_maps_are_well_formed(seed in any::<u64>(), b in any::<bool>()) {
        let scene = generate_scene(seed, &GrammarConfig::default()).unwrap();
        let style = if b { DomainStyle::domain_b() } else { DomainStyle::domain_a() };
        let s = render(&scene, &style, (32, 48)).unwrap();
        prop_assert_eq!(s.image.shape(), &[3, 32, 48]);
        prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for ((&d, &l), &m) in s.depth.data().iter().zip(s.labels.data()).zip(s.valid_mask.data()) {
            prop_assert!((D_MIN..=D_MAX).contains(&d));
            prop_assert!(l.fract() == 0.0 && (l as usize) < NUM_CLASSES);
            prop_assert!(m == 1.0);
            if l as usize == Class::Sky.id() {
                prop_assert_eq!(d, D_MAX);
            }
        }
    }

    #[test]
    fn domain_style_changes_appearance_only(seed in any::<u64>()) {
        let scene = generate_scene(seed, &GrammarConfig::default()).unwrap();
        let a = render(&scene, &DomainStyle::domain_a(), (32, 32)).unwrap();
        let b = render(&scene, &DomainStyle::domain_b(), (32, 32)).unwrap();
        prop_assert_eq!(a.depth.data(), b.depth.data());
        prop_assert_eq!(a.labels.data(), b.labels.data());
        prop_assert!(a.image.data() != b.image.data());
    }
}

#[test]
fn paired_datasets_share_geometry() {
    let cfg = DatasetConfig {
        n_train: 4,
        n_val: 2,
        n_test: 2,
        resolution: [32, 32],
        paired: true,
        ..DatasetConfig::default()
    };
    let d = build_dataset(&cfg, 11).unwrap();
    assert_eq!(d.a.train.labels.data(), d.b.train.labels.data());
    assert_eq!(d.a.test.depth.data(), d.b.test.depth.data());
    let unpaired = build_dataset(&DatasetConfig { paired: false, ..cfg }, 11).unwrap();
    assert_ne!(unpaired.a.train.labels.data(), unpaired.b.train.labels.data());
}

#[test]
fn export_round_trips_through_netpbm() {
    let cfg = DatasetConfig {
        n_train: 3,
        n_val: 0,
        n_test: 1,
        resolution: [32, 40],
        ..DatasetConfig::default()
    };
    let d = build_dataset(&cfg, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = export_split(dir.path(), &d.b.train, SplitKind::Train).unwrap();
    assert_eq!(m.files.len(), 3);
    for (i, [img, depth, labels]) in m.files.iter().enumerate() {
        let s = d.b.train.sample(i).unwrap();
        let im = read_ppm(&dir.path().join(img)).unwrap();
        assert!(im
            .data()
            .iter()
            .zip(s.image.data())
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-12));
        let dp = read_depth_pgm(&dir.path().join(depth)).unwrap();
        assert!(dp.data().iter().zip(s.depth.data()).all(|(a, b)| (a - b).abs() <= 1e-3));
        assert_eq!(read_pgm(&dir.path().join(labels)).unwrap().data(), s.labels.data());
    }
}
