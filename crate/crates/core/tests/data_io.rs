//! IDX files, splits, preprocessing and checkpoint files.

use proptest::prelude::*;
use stabletrain::checkpoint::Checkpoint;
use stabletrain::data::{
    load_idx, load_synthetic, read_idx_images, read_idx_labels, split_per_class, write_idx_images,
    write_idx_labels, Pattern, Pipeline, RawImage, Split, SyntheticSpec,
};
use stabletrain::nn::{build_model, ModelConfig};
use stabletrain::Category;

fn raw_images() -> impl Strategy<Value = Vec<RawImage>> {
    (1usize..6, 1usize..7, 1usize..7, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(n, h, w, c)| {
        proptest::collection::vec(proptest::collection::vec(any::<u8>(), h * w * c), n)
            .prop_map(move |px| px.into_iter().map(|p| RawImage::new(h, w, c, p).unwrap()).collect())
    })
}

proptest! {
    #[test]
    fn idx_round_trip(images in raw_images(), labels in proptest::collection::vec(0usize..10, 6)) {
        let bytes = write_idx_images(&images).unwrap();
        prop_assert_eq!(read_idx_images(&bytes).unwrap(), images.clone());
        let labels = &labels[..images.len()];
        prop_assert_eq!(read_idx_labels(&write_idx_labels(labels).unwrap()).unwrap(), labels.to_vec());
    }

    #[test]
    fn truncated_idx_is_a_data_error(images in raw_images(), cut in 0.0f64..1.0) {
        let bytes = write_idx_images(&images).unwrap();
        let keep = ((bytes.len() - 1) as f64 * cut) as usize;
        let err = read_idx_images(&bytes[..keep]).unwrap_err();
        prop_assert_eq!(err.category(), Category::Data);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let _ = read_idx_images(&bytes);
        let _ = read_idx_labels(&bytes);
        let _ = Checkpoint::<f32>::from_bytes(&bytes);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected_or_equal(pos in 0.0f64..1.0, flip in 1u8..=255) {
        let cfg = ModelConfig { height: 4, width: 4, channels: 1, classes: 2, stem_channels: 2, stem_stride: 1, stage_blocks: vec![1], norm: true };
        let ck = Checkpoint { model: build_model::<f32>(&cfg, 0).unwrap(), optimizer: None, epoch: 3, val_score: 0.5 };
        let mut bytes = ck.to_bytes().unwrap();
        let i = ((bytes.len() - 1) as f64 * pos) as usize;
        bytes[i] ^= flip;
        // A flipped payload byte may still parse; it must never panic or
        // silently return the original.
        if let Ok(back) = Checkpoint::<f32>::from_bytes(&bytes) {
            prop_assert_ne!(back, ck);
        }
    }
}

#[test]
fn idx_files_load_with_class_checks() {
    let dir = tempfile::tempdir().unwrap();
    let images: Vec<RawImage> = (0..6).map(|i| RawImage::new(4, 5, 1, vec![i as u8 * 40; 20]).unwrap()).collect();
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&ip, write_idx_images(&images).unwrap()).unwrap();
    std::fs::write(&lp, write_idx_labels(&[0, 1, 2, 0, 1, 2]).unwrap()).unwrap();
    let ds = load_idx(&ip, &lp, None, Split::Train).unwrap();
    assert_eq!((ds.len(), ds.classes), (6, 3));
    assert_eq!(ds.class_counts(), vec![2, 2, 2]);
    assert!(load_idx(&ip, &lp, Some(2), Split::Train).is_err());

    std::fs::write(&lp, write_idx_labels(&[0, 1, 2]).unwrap()).unwrap();
    let err = load_idx(&ip, &lp, None, Split::Train).unwrap_err();
    assert!(err.to_string().contains("3 labels for 6 images"), "{err}");
    let err = load_idx(&dir.path().join("missing"), &lp, None, Split::Train).unwrap_err();
    assert_eq!(err.category(), Category::Data);
}

#[test]
fn splits_are_disjoint_balanced_and_seeded() {
    let spec = SyntheticSpec {
        classes: 4,
        per_class: 12,
        side: 10,
        ..SyntheticSpec::desk()
    };
    let ds = load_synthetic(&spec, 0).unwrap();
    let (tr, va, te) = split_per_class(&ds, 7, 3, 9).unwrap();
    assert_eq!(tr.class_counts(), vec![7; 4]);
    assert_eq!(va.class_counts(), vec![3; 4]);
    assert_eq!(te.class_counts(), vec![2; 4]);
    let again = split_per_class(&ds, 7, 3, 9).unwrap();
    assert_eq!(again.0.images, tr.images);
    let other = split_per_class(&ds, 7, 3, 10).unwrap();
    assert_ne!(other.0.images, tr.images);
    for a in &tr.images {
        assert!(!va.images.contains(a) && !te.images.contains(a));
    }
    assert!(split_per_class(&ds, 10, 3, 0).is_err());
}

#[test]
fn synthetic_families_differ_and_stay_in_range() {
    for pattern in [Pattern::Oriented, Pattern::Isotropic] {
        let spec = SyntheticSpec {
            per_class: 2,
            pattern,
            ..SyntheticSpec::desk()
        };
        let ds = load_synthetic(&spec, 4).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(ds, load_synthetic(&spec, 4).unwrap());
        assert_ne!(ds.images, load_synthetic(&spec, 5).unwrap().images);
        let unit = ds.images[0].to_unit();
        assert!(unit.in_unit_range());
        assert_eq!((unit.height(), unit.width(), unit.channels()), (36, 36, 3));
    }
}

#[test]
fn pipeline_resizes_shortest_side_then_crops_center() {
    let raw = RawImage::new(20, 30, 3, (0..20 * 30 * 3).map(|i| (i % 251) as u8).collect()).unwrap();
    let p = Pipeline { resize: 12, crop: 10 };
    let src = p.source(&raw).unwrap();
    assert_eq!((src.height(), src.width()), (12, 18));
    let crop = p.center_crop(&src).unwrap();
    assert_eq!((crop.height(), crop.width()), (10, 10));
    assert_eq!(crop.get(0, 0, 1), src.get(1, 4, 1));
    assert_eq!(p.max_offset(), 1);
    assert!(Pipeline { resize: 8, crop: 10 }.validate().is_err());
}
