use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::seeded_rng;

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
    let mut bits = vec![false; h * w];
    for &(y, x) in on {
        bits[y * w + x] = true;
    }
    BinaryMask::new(h, w, bits, (1.0, 1.0))
}

fn random_mask(rng: &mut crate::Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    let bits = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    BinaryMask::new(h, w, bits, (1.0, 1.0))
}

/// Brute-force confusion counts, independent of the library code.
fn oracle_counts(pred: &BinaryMask, gt: &BinaryMask) -> (usize, usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for i in 0..pred.bits.len() {
        match (pred.bits[i], gt.bits[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

/// Independent HD95 oracle: boundaries recomputed from the definition and
/// the percentile taken over explicitly pooled all-pairs minima.
fn oracle_hd95(pred: &BinaryMask, gt: &BinaryMask) -> Option<f64> {
    let bounds = |m: &BinaryMask| -> Vec<(f64, f64)> {
        let mut v = Vec::new();
        for y in 0..m.height {
            for x in 0..m.width {
                if !m.bits[y * m.width + x] {
                    continue;
                }
                let neighbors = [
                    (y as isize - 1, x as isize),
                    (y as isize + 1, x as isize),
                    (y as isize, x as isize - 1),
                    (y as isize, x as isize + 1),
                ];
                let is_boundary = neighbors.iter().any(|&(ny, nx)| {
                    ny < 0
                        || nx < 0
                        || ny >= m.height as isize
                        || nx >= m.width as isize
                        || !m.bits[ny as usize * m.width + nx as usize]
                });
                if is_boundary {
                    v.push((y as f64 * m.spacing.0 as f64, x as f64 * m.spacing.1 as f64));
                }
            }
        }
        v
    };
    let pb = bounds(pred);
    let gb = bounds(gt);
    if pb.is_empty() || gb.is_empty() {
        return None;
    }
    let mut pool = Vec::new();
    for (from, to) in [(&pb, &gb), (&gb, &pb)] {
        for &(ay, ax) in from {
            let d = to
                .iter()
                .map(|&(by, bx)| ((ay - by).powi(2) + (ax - bx).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            pool.push(d);
        }
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = 0.95 * (pool.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    Some(if lo + 1 >= pool.len() {
        pool[pool.len() - 1]
    } else {
        pool[lo] + frac * (pool[lo + 1] - pool[lo])
    })
}

#[test]
fn dice_identical_masks_is_one() {
    let m = mask(4, 4, &[(0, 0), (1, 2), (3, 3)]);
    assert_eq!(dice(&m, &m).unwrap(), 1.0);
}

#[test]
fn dice_counts_partial_overlap() {
    let pred = mask(2, 2, &[(0, 0), (0, 1)]);
    let gt = mask(2, 2, &[(0, 1), (1, 1)]);
    assert_eq!(dice(&pred, &gt).unwrap(), 0.5);
}

#[test]
fn dice_both_empty_is_one_by_convention() {
    let a = mask(3, 3, &[]);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
}

#[test]
fn dice_zero_iff_disjoint_nonempty() {
    let a = mask(3, 3, &[(0, 0)]);
    let b = mask(3, 3, &[(2, 2)]);
    assert_eq!(dice(&a, &b).unwrap(), 0.0);
}

#[test]
fn dice_shape_mismatch_is_an_error() {
    let a = mask(3, 3, &[]);
    let b = mask(4, 3, &[]);
    assert!(dice(&a, &b).is_err());
}

#[test]
fn sensitivity_specificity_trivial_cases() {
    let gt = mask(4, 4, &[(1, 1), (2, 2)]);
    assert_eq!(sensitivity(&gt, &gt).unwrap(), Some(1.0));
    assert_eq!(specificity(&gt, &gt).unwrap(), Some(1.0));

    let all = BinaryMask::new(4, 4, vec![true; 16], (1.0, 1.0));
    assert_eq!(sensitivity(&all, &gt).unwrap(), Some(1.0));
    assert_eq!(specificity(&all, &gt).unwrap(), Some(0.0));

    // Empty denominators are None.
    let empty = mask(4, 4, &[]);
    assert_eq!(sensitivity(&all, &empty).unwrap(), None);
    assert_eq!(specificity(&empty, &all).unwrap(), None);
}

#[test]
fn metrics_match_counting_oracle_on_random_masks() {
    let mut rng = seeded_rng(71);
    for _ in 0..100 {
        let h = rng.gen_range(2..=32);
        let w = rng.gen_range(2..=32);
        let pred = random_mask(&mut rng, h, w, 0.4);
        let gt = random_mask(&mut rng, h, w, 0.4);
        let (tp, fp, fn_, tn) = oracle_counts(&pred, &gt);
        let d = dice(&pred, &gt).unwrap();
        let expect_d = if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        assert_eq!(d, expect_d);
        let s = sensitivity(&pred, &gt).unwrap();
        let expect_s = if tp + fn_ == 0 { None } else { Some(tp as f64 / (tp + fn_) as f64) };
        assert_eq!(s, expect_s);
        let sp = specificity(&pred, &gt).unwrap();
        let expect_sp = if tn + fp == 0 { None } else { Some(tn as f64 / (tn + fp) as f64) };
        assert_eq!(sp, expect_sp);
    }
}

#[test]
fn hd95_identical_masks_is_zero() {
    let m = mask(8, 8, &[(1, 1), (1, 2), (2, 1), (2, 2), (5, 6)]);
    assert_eq!(hd95(&m, &m).unwrap(), Some(0.0));
}

#[test]
fn hd95_single_pixels_is_euclidean_distance() {
    let a = mask(8, 8, &[(0, 0)]);
    let b = mask(8, 8, &[(3, 4)]);
    assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
}

#[test]
fn hd95_respects_spacing() {
    let mut a = mask(8, 8, &[(0, 0)]);
    let mut b = mask(8, 8, &[(0, 2)]);
    a.spacing = (1.0, 2.5);
    b.spacing = (1.0, 2.5);
    assert_eq!(hd95(&a, &b).unwrap(), Some(5.0));
}

#[test]
fn hd95_empty_mask_is_undefined() {
    let a = mask(4, 4, &[]);
    let b = mask(4, 4, &[(1, 1)]);
    assert_eq!(hd95(&a, &b).unwrap(), None);
}

#[test]
fn hd95_matches_brute_force_oracle_on_random_blobs() {
    let mut rng = seeded_rng(72);
    let mut checked = 0;
    while checked < 50 {
        let h = rng.gen_range(4..=32);
        let w = rng.gen_range(4..=32);
        let pred = random_mask(&mut rng, h, w, 0.25);
        let gt = random_mask(&mut rng, h, w, 0.25);
        let ours = hd95(&pred, &gt).unwrap();
        let oracle = oracle_hd95(&pred, &gt);
        match (ours, oracle) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                checked += 1;
            }
            (None, None) => {}
            other => panic!("definedness mismatch {other:?}"),
        }
    }
}

#[test]
fn hd95_never_exceeds_exact_hausdorff() {
    let mut rng = seeded_rng(73);
    for _ in 0..50 {
        let pred = random_mask(&mut rng, 16, 16, 0.3);
        let gt = random_mask(&mut rng, 16, 16, 0.3);
        if let (Some(p95), Some(hmax)) =
            (hd95(&pred, &gt).unwrap(), hausdorff_max(&pred, &gt).unwrap())
        {
            assert!(p95 <= hmax + 1e-12, "{p95} > {hmax}");
        }
    }
}

#[test]
fn per_class_report_perfect_prediction() {
    let (_, gt) =
        crate::data::generate_phantom(&mut seeded_rng(7), &crate::data::PhantomParams::default())
            .unwrap();
    let report = per_class_report(&gt, &gt, &[0, 1, 2, 3, 4, 5], (1.0, 1.0)).unwrap();
    for row in &report.rows {
        assert_eq!(row.dice, Some(1.0), "class {}", row.class);
        assert_eq!(row.hd95_mm, Some(0.0), "class {}", row.class);
    }
}

#[test]
fn per_class_report_unannotated_class_gives_none_row() {
    let (_, gt) =
        crate::data::generate_phantom(&mut seeded_rng(7), &crate::data::PhantomParams::default())
            .unwrap();
    let stored = gt.without_imat();
    let report = per_class_report(&gt, &stored, &[1, 3], (1.0, 1.0)).unwrap();
    let imat = report.row(3).unwrap();
    assert_eq!(
        (imat.dice, imat.sensitivity, imat.specificity, imat.hd95_mm),
        (None, None, None, None)
    );
    assert!(report.row(1).unwrap().dice.is_some());
}

#[test]
fn report_cells_match_binary_oracles_on_random_maps() {
    let mut rng = seeded_rng(74);
    for _ in 0..20 {
        let (h, w) = (12, 12);
        let classes: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
        let classes2: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..4)).collect();
        let pred = LabelMap::all_annotated(h, w, classes);
        let gt = LabelMap::all_annotated(h, w, classes2);
        let report = per_class_report(&pred, &gt, &[0, 1, 2, 3], (1.0, 1.0)).unwrap();
        for row in &report.rows {
            let p = BinaryMask::from_class(&pred, row.class, (1.0, 1.0));
            let g = BinaryMask::from_class(&gt, row.class, (1.0, 1.0));
            assert_eq!(row.dice, Some(dice(&p, &g).unwrap()));
            assert_eq!(row.sensitivity, sensitivity(&p, &g).unwrap());
            assert_eq!(row.specificity, specificity(&p, &g).unwrap());
            assert_eq!(row.hd95_mm, hd95(&p, &g).unwrap());
        }
    }
}

#[test]
fn aggregate_identical_values_have_zero_std() {
    let row = ClassMetrics {
        class: 1,
        dice: Some(0.75),
        sensitivity: Some(0.8),
        specificity: Some(0.9),
        hd95_mm: Some(2.0),
    };
    let report = MetricsReport { model: "m".into(), fold: None, seed: 0, rows: vec![row] };
    let agg = aggregate(&[report.clone(), report.clone(), report], &[1]);
    assert_eq!(agg[0].dice_mean, Some(0.75));
    assert_eq!(agg[0].dice_std, Some(0.0));
}

#[test]
fn csv_export_shape() {
    let report = MetricsReport {
        model: "tiramisu".into(),
        fold: Some(2),
        seed: 7,
        rows: vec![ClassMetrics {
            class: 3,
            dice: Some(0.5),
            sensitivity: None,
            specificity: Some(1.0),
            hd95_mm: None,
        }],
    };
    assert_eq!(
        MetricsReport::CSV_HEADER,
        "model,fold,seed,class,dice,sensitivity,specificity,hd95_mm"
    );
    assert_eq!(report.csv_rows(), "tiramisu,2,7,3,0.500000,,1.000000,\n");
}

proptest! {
    /// Symmetry of dice and hd95 under the pooled definition.
    #[test]
    fn dice_and_hd95_are_symmetric(seed in 0u64..500) {
        let mut rng = seeded_rng(seed);
        let pred = random_mask(&mut rng, 10, 10, 0.3);
        let gt = random_mask(&mut rng, 10, 10, 0.3);
        prop_assert_eq!(dice(&pred, &gt).unwrap(), dice(&gt, &pred).unwrap());
        prop_assert_eq!(hd95(&pred, &gt).unwrap(), hd95(&gt, &pred).unwrap());
    }

    /// Metrics are pure: same inputs give bit-identical outputs.
    #[test]
    fn metrics_are_reproducible(seed in 0u64..200) {
        let mut rng = seeded_rng(seed);
        let pred = random_mask(&mut rng, 9, 9, 0.35);
        let gt = random_mask(&mut rng, 9, 9, 0.35);
        prop_assert_eq!(dice(&pred, &gt).unwrap().to_bits(), dice(&pred, &gt).unwrap().to_bits());
        let a = hd95(&pred, &gt).unwrap();
        let b = hd95(&pred, &gt).unwrap();
        prop_assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
    }
}
