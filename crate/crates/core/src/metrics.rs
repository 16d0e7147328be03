//! Per-tissue segmentation metrics: Dice, sensitivity, specificity, and the
//! 95th-percentile Hausdorff distance over boundary pixels, plus report
//! aggregation and CSV export.
//!
//! HD95 here is the 95th percentile (linear interpolation) of the pooled
//! bidirectional boundary-distance multiset, scaled by the physical pixel
//! spacing. Boundaries are foreground pixels with a background 4-neighbor
//! or an image-edge side.

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Binary segmentation mask with physical spacing (mm per pixel step).
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
    pub spacing: (f32, f32),
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>, spacing: (f32, f32)) -> Self {
        assert_eq!(bits.len(), height * width);
        BinaryMask { height, width, bits, spacing }
    }

    pub fn from_class(labels: &LabelMap, class: u8, spacing: (f32, f32)) -> Self {
        BinaryMask::new(
            labels.height,
            labels.width,
            labels.classes.iter().map(|&c| c == class).collect(),
            spacing,
        )
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn require_same_shape(a: &BinaryMask, b: &BinaryMask, op: &'static str) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    Ok(())
}

/// Dice overlap `2|P∩G| / (|P|+|G|)`; 1.0 when both masks are empty.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    require_same_shape(pred, gt, "dice")?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// TP/(TP+FN); `None` when the ground truth has no positives.
pub fn sensitivity(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    require_same_shape(pred, gt, "sensitivity")?;
    let mut tp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        tp += (p && g) as usize;
        fn_ += (!p && g) as usize;
    }
    if tp + fn_ == 0 {
        return Ok(None);
    }
    Ok(Some(tp as f64 / (tp + fn_) as f64))
}

/// TN/(TN+FP); `None` when the ground truth has no negatives.
pub fn specificity(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    require_same_shape(pred, gt, "specificity")?;
    let mut tn = 0usize;
    let mut fp = 0usize;
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        tn += (!p && !g) as usize;
        fp += (p && !g) as usize;
    }
    if tn + fp == 0 {
        return Ok(None);
    }
    Ok(Some(tn as f64 / (tn + fp) as f64))
}

/// Boundary pixels: foreground with a 4-neighbor background pixel or an
/// image edge side. Returns (y, x) coordinates.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height, mask.width);
    let at = |y: usize, x: usize| mask.bits[y * w + x];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = y == 0 || y + 1 == h || x == 0 || x + 1 == w;
            if edge || !at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Percentile with linear interpolation between order statistics; `q` in
/// [0, 1]. The input need not be sorted.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

fn directed_distances(
    from: &[(usize, usize)],
    to: &[(usize, usize)],
    spacing: (f32, f32),
) -> Vec<f64> {
    let (sy, sx) = (spacing.0 as f64, spacing.1 as f64);
    from.iter()
        .map(|&(ay, ax)| {
            let mut best = f64::INFINITY;
            for &(by, bx) in to {
                let dy = (ay as f64 - by as f64) * sy;
                let dx = (ax as f64 - bx as f64) * sx;
                let d2 = dy * dy + dx * dx;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// HD95 in mm over the pooled bidirectional boundary distances.
/// `None` when either mask is empty (undefined metric).
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    require_same_shape(pred, gt, "hd95")?;
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    if pb.is_empty() || gb.is_empty() {
        return Ok(None);
    }
    let mut pooled = directed_distances(&pb, &gb, pred.spacing);
    pooled.extend(directed_distances(&gb, &pb, pred.spacing));
    Ok(Some(percentile(&pooled, 0.95)))
}

/// Exact (maximum) symmetric Hausdorff distance over the same boundary
/// sets; the 95th percentile can never exceed it.
pub fn hausdorff_max(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    require_same_shape(pred, gt, "hausdorff_max")?;
    let pb = boundary_pixels(pred);
    let gb = boundary_pixels(gt);
    if pb.is_empty() || gb.is_empty() {
        return Ok(None);
    }
    let a = directed_distances(&pb, &gb, pred.spacing);
    let b = directed_distances(&gb, &pb, pred.spacing);
    Ok(Some(a.into_iter().chain(b).fold(0.0, f64::max)))
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub hd95_mm: Option<f64>,
}

/// Per-class metrics with run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub fold: Option<u32>,
    pub seed: u64,
    pub rows: Vec<ClassMetrics>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "model,fold,seed,class,dice,sensitivity,specificity,hd95_mm";

    pub fn row(&self, class: u8) -> Option<&ClassMetrics> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// Mean Dice over rows that have one (background excluded).
    pub fn mean_foreground_dice(&self) -> Option<f64> {
        let vals: Vec<f64> =
            self.rows.iter().filter(|r| r.class != 0).filter_map(|r| r.dice).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn csv_rows(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let fold = self.fold.map(|f| f.to_string()).unwrap_or_default();
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{}\n",
                    self.model,
                    fold,
                    self.seed,
                    r.class,
                    fmt(r.dice),
                    fmt(r.sensitivity),
                    fmt(r.specificity),
                    fmt(r.hd95_mm)
                )
            })
            .collect()
    }
}

/// Binarizes per class (one-vs-rest) and computes all four metrics.
/// Classes missing from the ground truth's annotated set yield all-`None`
/// rows rather than failing.
pub fn per_class_report(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: &[u8],
    spacing: (f32, f32),
) -> Result<MetricsReport> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::ShapeMismatch {
            op: "per_class_report",
            left: vec![pred.height, pred.width],
            right: vec![gt.height, gt.width],
        });
    }
    let mut rows = Vec::with_capacity(classes.len());
    for &class in classes {
        if !gt.annotated_classes.contains(&class) {
            rows.push(ClassMetrics {
                class,
                dice: None,
                sensitivity: None,
                specificity: None,
                hd95_mm: None,
            });
            continue;
        }
        let p = BinaryMask::from_class(pred, class, spacing);
        let g = BinaryMask::from_class(gt, class, spacing);
        rows.push(ClassMetrics {
            class,
            dice: Some(dice(&p, &g)?),
            sensitivity: sensitivity(&p, &g)?,
            specificity: specificity(&p, &g)?,
            hd95_mm: hd95(&p, &g)?,
        });
    }
    Ok(MetricsReport { model: String::new(), fold: None, seed: 0, rows })
}

/// Mean and standard deviation per class across reports (population std;
/// a single report aggregates with std 0).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub class: u8,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub sensitivity_mean: Option<f64>,
    pub specificity_mean: Option<f64>,
    pub hd95_mean: Option<f64>,
}

pub fn aggregate(reports: &[MetricsReport], classes: &[u8]) -> Vec<AggregateRow> {
    let collect = |class: u8, pick: &dyn Fn(&ClassMetrics) -> Option<f64>| -> Vec<f64> {
        reports.iter().filter_map(|r| r.row(class)).filter_map(pick).collect()
    };
    let stats = |vals: &[f64]| -> (Option<f64>, Option<f64>) {
        if vals.is_empty() {
            return (None, None);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (Some(mean), Some(var.sqrt()))
    };
    classes
        .iter()
        .map(|&class| {
            let (dice_mean, dice_std) = stats(&collect(class, &|r| r.dice));
            let (sens, _) = stats(&collect(class, &|r| r.sensitivity));
            let (spec, _) = stats(&collect(class, &|r| r.specificity));
            let (hd, _) = stats(&collect(class, &|r| r.hd95_mm));
            AggregateRow {
                class,
                dice_mean,
                dice_std,
                sensitivity_mean: sens,
                specificity_mean: spec,
                hd95_mean: hd,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests;
