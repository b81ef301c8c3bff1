mod common;

use ssformers::data::{
    export_dataset, generate_synthetic_dataset, load_dataset, read_ppm, ClassImages, Dataset, SplitKind,
    SyntheticSpec,
};
use ssformers::Error;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        train_classes: 12,
        val_classes: 4,
        test_classes: 4,
        images_per_class: 40,
        side: 32,
        ..SyntheticSpec::default()
    }
}

#[test]
fn synthetic_counts() {
    let ds = generate_synthetic_dataset(&small_spec(), 3).unwrap();
    assert_eq!(ds.image_count(), 800);
    assert_eq!(ds.train.class_count(), 12);
    assert_eq!(ds.val.class_count(), 4);
    assert_eq!(ds.test.class_count(), 4);
    assert!(ds.test.classes.iter().all(|c| c.images.len() == 40 && c.images[0].side() == 32));
}

#[test]
fn synthetic_is_deterministic() {
    let spec = SyntheticSpec {
        images_per_class: 5,
        ..small_spec()
    };
    let a = generate_synthetic_dataset(&spec, 9).unwrap();
    let b = generate_synthetic_dataset(&spec, 9).unwrap();
    let c = generate_synthetic_dataset(&spec, 10).unwrap();
    let bits = |d: &Dataset| -> Vec<u64> {
        SplitKind::ALL
            .iter()
            .flat_map(|&k| d.split(k).classes.iter())
            .flat_map(|c| c.images.iter())
            .flat_map(|im| im.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn glyph_is_the_only_structure_without_clutter() {
    let spec = SyntheticSpec {
        distractor_intensity: 0.0,
        noise_std: 0.0,
        images_per_class: 6,
        ..small_spec()
    };
    let ds = generate_synthetic_dataset(&spec, 4).unwrap();
    let cell = spec.side / spec.layout_cells;
    for class in &ds.train.classes {
        for im in &class.images {
            // Exactly one lattice cell differs from the flat background.
            let mut marked = 0;
            for cy in 0..spec.layout_cells {
                for cx in 0..spec.layout_cells {
                    let flat = (0..3).all(|c| {
                        (0..cell).all(|y| (0..cell).all(|x| im.pixel(c, cy * cell + y, cx * cell + x) == 0.5))
                    });
                    marked += usize::from(!flat);
                }
            }
            assert_eq!(marked, 1);
        }
    }
}

#[test]
fn glyph_covers_at_most_a_quarter() {
    let bad = SyntheticSpec {
        layout_cells: 1,
        ..small_spec()
    };
    assert!(matches!(generate_synthetic_dataset(&bad, 1), Err(Error::Config(_))));
    let bad = SyntheticSpec {
        glyph_intensity: 1.5,
        ..small_spec()
    };
    assert!(matches!(generate_synthetic_dataset(&bad, 1), Err(Error::Config(_))));
}

#[test]
fn export_then_load_within_quantization() {
    let spec = SyntheticSpec {
        images_per_class: 3,
        train_classes: 3,
        val_classes: 2,
        test_classes: 2,
        ..small_spec()
    };
    let ds = generate_synthetic_dataset(&spec, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path(), spec.side).unwrap();
    for kind in SplitKind::ALL {
        let (a, b) = (ds.split(kind), back.split(kind));
        assert_eq!(a.class_count(), b.class_count());
        for (ca, cb) in a.classes.iter().zip(&b.classes) {
            assert_eq!(ca.name, cb.name);
            for (ia, ib) in ca.images.iter().zip(&cb.images) {
                let worst = ia.data().iter().zip(ib.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
            }
        }
    }
}

#[test]
fn load_resizes_to_configured_side() {
    let spec = SyntheticSpec {
        images_per_class: 2,
        train_classes: 2,
        val_classes: 1,
        test_classes: 1,
        ..small_spec()
    };
    let dir = tempfile::tempdir().unwrap();
    export_dataset(&generate_synthetic_dataset(&spec, 1).unwrap(), dir.path()).unwrap();
    let ds = load_dataset(dir.path(), 16).unwrap();
    assert_eq!(ds.train.classes[0].images[0].side(), 16);
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert!(matches!(load_dataset(root, 8), Err(Error::Dataset(_))));

    for split in ["train", "val", "test"] {
        std::fs::create_dir_all(root.join(split).join(format!("{split}_a"))).unwrap();
    }
    // Empty class directory.
    assert!(matches!(load_dataset(root, 8), Err(Error::Dataset(_))));

    for split in ["train", "val", "test"] {
        std::fs::write(root.join(split).join(format!("{split}_a")).join("0.ppm"), "P3 1 1 255 1 2 3").unwrap();
    }
    let ds = load_dataset(root, 8).unwrap();
    assert_eq!(ds.train.class_count(), 1);
    let (_, _, px) = read_ppm(&root.join("train/train_a/0.ppm")).unwrap();
    assert!((px[0] - 1.0 / 255.0).abs() < 1e-15);

    let broken = root.join("test/test_a/1.ppm");
    std::fs::write(&broken, "P6 4 4 255 xx").unwrap();
    match load_dataset(root, 8) {
        Err(Error::Decode { path, .. }) => assert_eq!(path, broken),
        other => panic!("expected a decode error, got {other:?}"),
    }
}

#[test]
fn splits_must_be_class_disjoint() {
    let mut ds = generate_synthetic_dataset(
        &SyntheticSpec {
            images_per_class: 1,
            ..small_spec()
        },
        1,
    )
    .unwrap();
    assert!(ds.validate().is_ok());
    let dup = ds.train.classes[0].clone();
    ds.test.classes.push(ClassImages {
        name: dup.name,
        images: dup.images,
    });
    assert!(matches!(ds.validate(), Err(Error::Dataset(_))));
}
