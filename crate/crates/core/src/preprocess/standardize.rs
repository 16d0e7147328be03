//! Landmark-based intensity standardization (two-stage decile method).
//!
//! Training maps each image's foreground landmarks (min, deciles p10..p90,
//! max) onto [1, 4095] and averages them into standard positions; applying
//! the scale pushes a new image through the piecewise-linear map defined by
//! its own landmarks and those standard positions, clamped to [1, 4095].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::bias::foreground_mask;
use crate::preprocess::GrayImage;

pub const SCALE_MIN: f32 = 1.0;
pub const SCALE_MAX: f32 = 4095.0;

/// Landmark quantile fractions: min, deciles, max.
pub const LANDMARK_FRACTIONS: [f64; 11] =
    [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Learned standard scale: landmark positions on [1, 4095], strictly
/// increasing, plus the training provenance for the leakage guard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardScale {
    pub positions: Vec<f32>,
    /// Subject ids whose images trained this scale (leakage guard).
    pub trained_on: Vec<String>,
}

impl StandardScale {
    /// Errors if any of `subjects` contributed to scale training.
    pub fn assert_disjoint_from(&self, subjects: &[String]) -> Result<()> {
        for s in subjects {
            if self.trained_on.contains(s) {
                return Err(Error::Protocol(format!(
                    "standard scale was trained on held-out subject {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f32], q: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        (sorted[lo] as f64 + frac * (sorted[lo + 1] as f64 - sorted[lo] as f64)) as f32
    }
}

/// Foreground landmark values of one image.
pub fn image_landmarks(img: &GrayImage) -> Result<Vec<f32>> {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::DegenerateHistogram(format!("constant intensity {lo}")));
    }
    let mask = foreground_mask(img);
    let mut fg: Vec<f32> =
        img.pixels.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
    if fg.is_empty() {
        return Err(Error::NoForeground);
    }
    fg.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    if fg[fg.len() - 1] <= fg[0] {
        return Err(Error::DegenerateHistogram(format!(
            "constant foreground intensity {}",
            fg[0]
        )));
    }
    Ok(LANDMARK_FRACTIONS.iter().map(|&q| quantile(&fg, q)).collect())
}

/// Learns the standard landmark positions from training images.
pub fn train_scale(images: &[&GrayImage]) -> Result<StandardScale> {
    if images.is_empty() {
        return Err(Error::Config("train_scale requires at least one image".into()));
    }
    let mut acc = vec![0.0f64; LANDMARK_FRACTIONS.len()];
    for img in images {
        let lm = image_landmarks(img)?;
        let lo = lm[0] as f64;
        let hi = lm[lm.len() - 1] as f64;
        for (a, &v) in acc.iter_mut().zip(&lm) {
            *a += SCALE_MIN as f64
                + (v as f64 - lo) / (hi - lo) * (SCALE_MAX as f64 - SCALE_MIN as f64);
        }
    }
    let mut positions: Vec<f32> = acc.iter().map(|&a| (a / images.len() as f64) as f32).collect();
    // Degenerate training sets can tie adjacent landmarks; nudge upward to
    // keep the map strictly increasing.
    for i in 1..positions.len() {
        if positions[i] <= positions[i - 1] {
            positions[i] = positions[i - 1] + 1e-3;
        }
    }
    Ok(StandardScale { positions, trained_on: Vec::new() })
}

/// Maps one intensity through the piecewise-linear landmark map. Values
/// outside the landmark range extrapolate with the slope of the nearest
/// segment. Monotone non-decreasing; output clamped to [1, 4095].
pub fn standardize_value(v: f32, landmarks: &[f32], scale: &StandardScale) -> f32 {
    let pos = &scale.positions;
    debug_assert_eq!(landmarks.len(), pos.len());
    let last = landmarks.len() - 1;
    let mapped = if v < landmarks[0] {
        match (1..=last).find(|&i| landmarks[i] > landmarks[0]) {
            Some(k2) => {
                pos[0] + (v - landmarks[0]) * (pos[k2] - pos[0]) / (landmarks[k2] - landmarks[0])
            }
            None => pos[0],
        }
    } else if v > landmarks[last] {
        match (0..last).rev().find(|&i| landmarks[i] < landmarks[last]) {
            Some(k) => {
                pos[last]
                    + (v - landmarks[last]) * (pos[last] - pos[k]) / (landmarks[last] - landmarks[k])
            }
            None => pos[last],
        }
    } else {
        // Interior: find the segment, skipping zero-width (tied) landmarks.
        let mut k = 0usize;
        for i in (0..=last).rev() {
            if landmarks[i] <= v {
                k = i;
                break;
            }
        }
        if k == last {
            pos[last]
        } else {
            let mut k2 = k + 1;
            while k2 < last && landmarks[k2] <= landmarks[k] {
                k2 += 1;
            }
            let width = landmarks[k2] - landmarks[k];
            if width > 0.0 {
                pos[k] + (v - landmarks[k]) / width * (pos[k2] - pos[k])
            } else {
                pos[k]
            }
        }
    };
    mapped.clamp(SCALE_MIN, SCALE_MAX)
}

/// Applies the learned scale to an image.
pub fn standardize(img: &GrayImage, scale: &StandardScale) -> Result<GrayImage> {
    let landmarks = image_landmarks(img)?;
    let pixels =
        img.pixels.iter().map(|&v| standardize_value(v, &landmarks, scale)).collect();
    Ok(GrayImage::new(img.height, img.width, pixels, img.spacing))
}
