use std::collections::BTreeSet;

use super::phantom::check_containment;
use super::*;
use crate::error::Error;
use crate::seeded_rng;

#[test]
fn phantom_default_seed_contains_all_classes() {
    let (_, labels) = generate_phantom(&mut seeded_rng(7), &PhantomParams::default()).unwrap();
    let present: BTreeSet<u8> = labels.classes.iter().copied().collect();
    assert_eq!(present, (0..NUM_CLASSES as u8).collect::<BTreeSet<_>>());
}

#[test]
fn phantom_without_noise_and_bias_matches_lut() {
    let params = PhantomParams { noise_sigma: 0.0, bias_strength: 0.0, ..Default::default() };
    let (slice, labels) = generate_phantom(&mut seeded_rng(3), &params).unwrap();
    for ch in 0..3 {
        for (i, &class) in labels.classes.iter().enumerate() {
            assert_eq!(
                slice.channels[ch].pixels[i],
                params.intensity_lut[class as usize][ch],
                "channel {ch}, pixel {i}, class {class}"
            );
        }
    }
}

#[test]
fn phantom_same_seed_is_bit_identical() {
    let params = PhantomParams::default();
    let (a_img, a_lab) = generate_phantom(&mut seeded_rng(99), &params).unwrap();
    let (b_img, b_lab) = generate_phantom(&mut seeded_rng(99), &params).unwrap();
    assert_eq!(a_lab.classes, b_lab.classes);
    for ch in 0..3 {
        let bits_a: Vec<u32> = a_img.channels[ch].pixels.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b_img.channels[ch].pixels.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn phantom_containment_holds_across_seeds() {
    let params = PhantomParams::default();
    for seed in 0..10 {
        let anatomy =
            super::phantom::subject_anatomy(crate::derive_seed(seed, 0x5_0000), &params).unwrap();
        let mut rng = seeded_rng(seed);
        let (_, labels) =
            super::phantom::generate_slice_for(&anatomy, &mut rng, &params, "t".into(), 0)
                .unwrap();
        check_containment(&anatomy, &labels).unwrap();
    }
}

#[test]
fn phantom_infeasible_geometry_is_config_error() {
    let params = PhantomParams { image_size: 8, ..Default::default() };
    let err = generate_phantom(&mut seeded_rng(1), &params).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn corpus_fraction_one_labels_every_subject() {
    let params = PhantomParams::default();
    let data = make_corpus(5, 6, 2, 1.0, &params).unwrap();
    for rec in &data.slices {
        assert!(rec.label.as_ref().unwrap().annotated_classes.contains(&CLASS_IMAT));
    }
}

#[test]
fn corpus_fraction_mirrors_twenty_of_fifty() {
    let params = PhantomParams { image_size: 32, imat_speckles: 6, ..Default::default() };
    let data = make_corpus(11, 50, 1, 0.4, &params).unwrap();
    assert_eq!(data.subjects.len(), 50);
    assert_eq!(data.imat_labeled_subjects().len(), 20);
    assert_eq!(data.imat_unlabeled_subjects().len(), 30);
}

#[test]
fn corpus_hidden_truth_always_carries_imat() {
    let data = make_corpus(21, 4, 2, 0.0, &PhantomParams::default()).unwrap();
    for rec in &data.slices {
        let hidden = rec.hidden_truth.as_ref().unwrap();
        assert!(hidden.contains_class(CLASS_IMAT), "hidden truth lost IMAT");
        // Stored label merged IMAT away but kept the pixels as muscle.
        let stored = rec.label.as_ref().unwrap();
        assert!(!stored.contains_class(CLASS_IMAT));
        assert!(!stored.annotated_classes.contains(&CLASS_IMAT));
    }
}

#[test]
fn splits_five_folds_of_fifty_have_ten_test_subjects() {
    let subjects: Vec<String> = (0..50).map(|i| format!("S{i:03}")).collect();
    let plan = make_splits(&subjects, (70, 10, 20), 5, 42).unwrap();
    assert_eq!(plan.folds.len(), 5);
    let mut seen = BTreeSet::new();
    for fold in &plan.folds {
        assert_eq!(fold.test.len(), 10);
        assert_eq!(fold.val.len(), 5);
        assert_eq!(fold.train.len(), 35);
        for s in &fold.test {
            assert!(seen.insert(s.clone()), "test subject {s} in two folds");
        }
    }
    assert_eq!(seen.len(), 50);
}

#[test]
fn splits_ten_subjects_split_7_1_2() {
    let subjects: Vec<String> = (0..10).map(|i| format!("S{i}")).collect();
    let plan = make_splits(&subjects, (70, 10, 20), 5, 1).unwrap();
    for fold in &plan.folds {
        assert_eq!((fold.train.len(), fold.val.len(), fold.test.len()), (7, 1, 2));
    }
}

#[test]
fn splits_single_fold_supports_90_10() {
    let subjects: Vec<String> = (0..20).map(|i| format!("S{i}")).collect();
    let plan = make_splits(&subjects, (90, 10, 0), 1, 9).unwrap();
    let fold = &plan.folds[0];
    assert_eq!(fold.test.len(), 0);
    assert_eq!(fold.val.len(), 2);
    assert_eq!(fold.train.len(), 18);
}

#[test]
fn splits_are_seed_deterministic_and_reject_bad_input() {
    let subjects: Vec<String> = (0..12).map(|i| format!("S{i}")).collect();
    let a = make_splits(&subjects, (70, 10, 20), 3, 5).unwrap();
    let b = make_splits(&subjects, (70, 10, 20), 3, 5).unwrap();
    assert_eq!(a, b);
    assert!(make_splits(&subjects, (70, 10, 10), 3, 5).is_err());
    let two: Vec<String> = vec!["A".into(), "B".into()];
    assert!(make_splits(&two, (70, 10, 20), 5, 5).is_err());
}

#[test]
fn volume_roundtrip_is_bit_identical() {
    let dir = std::env::temp_dir().join(format!("thighseg-vol-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (slice, labels) = generate_phantom(&mut seeded_rng(17), &PhantomParams::default()).unwrap();
    let path = dir.join("one.mcsl");
    save_volume(&path, &slice, &labels).unwrap();
    let (loaded, loaded_labels) = load_volume(&path).unwrap();
    for ch in 0..3 {
        let a: Vec<u32> = slice.channels[ch].pixels.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = loaded.channels[ch].pixels.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }
    assert_eq!(labels.classes, loaded_labels.classes);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn truncated_volume_is_a_parse_error() {
    let dir = std::env::temp_dir().join(format!("thighseg-trunc-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (slice, labels) = generate_phantom(&mut seeded_rng(18), &PhantomParams::default()).unwrap();
    let bytes = volume_bytes(&slice, &labels);
    let path = dir.join("cut.mcsl");
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_volume(&path).unwrap_err();
    assert!(matches!(err, Error::Parse { .. }), "{err:?}");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn out_of_range_label_is_rejected_by_name() {
    let dir = std::env::temp_dir().join(format!("thighseg-range-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let (slice, labels) = generate_phantom(&mut seeded_rng(19), &PhantomParams::default()).unwrap();
    let mut bytes = volume_bytes(&slice, &labels);
    let last = bytes.len() - 1;
    bytes[last] = 9;
    let path = dir.join("bad.mcsl");
    std::fs::write(&path, &bytes).unwrap();
    match load_volume(&path).unwrap_err() {
        Error::Parse { detail, .. } => assert!(detail.contains('9'), "{detail}"),
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn corpus_roundtrip_preserves_provenance_and_annotations() {
    let dir = std::env::temp_dir().join(format!("thighseg-corpus-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let params = PhantomParams { image_size: 32, imat_speckles: 6, ..Default::default() };
    let mut data = make_corpus(23, 4, 2, 0.5, &params).unwrap();
    // Pseudo provenance must survive save/load.
    data.slices[0].provenance = Provenance::Pseudo;
    save_corpus(&data, &dir).unwrap();
    let loaded = load_corpus(&dir).unwrap();
    assert_eq!(loaded.slices.len(), data.slices.len());
    assert_eq!(loaded.subjects, data.subjects);
    assert_eq!(loaded.slices[0].provenance, Provenance::Pseudo);
    for (a, b) in data.slices.iter().zip(&loaded.slices) {
        assert_eq!(
            a.label.as_ref().unwrap().annotated_classes,
            b.label.as_ref().unwrap().annotated_classes
        );
        assert_eq!(a.label.as_ref().unwrap().classes, b.label.as_ref().unwrap().classes);
        assert_eq!(
            a.hidden_truth.as_ref().unwrap().classes,
            b.hidden_truth.as_ref().unwrap().classes
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}
