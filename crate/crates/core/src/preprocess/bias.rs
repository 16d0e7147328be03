//! Multiplicative bias-field estimation.
//!
//! Desk-scale N4-flavored scheme: iterate in the log domain, sharpening the
//! foreground intensity histogram by quantizing to its modes (1-d k-means)
//! and fitting the leftover smooth residual with a normalized Gaussian
//! low-pass smoother. The estimated field is strictly positive and
//! normalized to mean 1 over the foreground.

use crate::error::{Error, Result};
use crate::preprocess::{require_same_shape, GrayImage};

/// Otsu's threshold over a 256-bin histogram of log intensities (with a
/// relative floor at 1e-3 of the maximum, so the split point survives
/// monotone rescalings such as standardization). Returns the threshold in
/// original intensity units; pixels strictly above it are foreground.
pub fn otsu_threshold(img: &GrayImage) -> f32 {
    let max = img.pixels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        return max; // empty or all-zero image: nothing is strictly above
    }
    let floor = max * 1e-3;
    let logs: Vec<f32> = img.pixels.iter().map(|&v| v.max(floor).ln()).collect();
    let (lo, hi) =
        logs.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return max; // constant image
    }
    const BINS: usize = 256;
    let mut hist = [0u32; BINS];
    let scale = (BINS as f32 - 1.0) / (hi - lo);
    for &v in &logs {
        hist[((v - lo) * scale) as usize] += 1;
    }
    let total = logs.len() as f64;
    let total_mean: f64 =
        hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / total;
    let mut best_between = -1.0f64;
    let mut best_bin = 0usize;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_mean * total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best_between {
            best_between = between;
            best_bin = i;
        }
    }
    (lo + best_bin as f32 / scale).exp()
}

/// Otsu's threshold over the raw intensity histogram (256 bins). Used for
/// the bias fit, which wants genuinely bright tissue.
fn otsu_threshold_linear(img: &GrayImage) -> f32 {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return hi;
    }
    const BINS: usize = 256;
    let mut hist = [0u32; BINS];
    let scale = (BINS as f32 - 1.0) / (hi - lo);
    for &v in &img.pixels {
        hist[((v - lo) * scale) as usize] += 1;
    }
    let total = img.pixels.len() as f64;
    let total_mean: f64 =
        hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / total;
    let mut best_between = -1.0f64;
    let mut best_bin = 0usize;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for (i, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (total_mean * total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best_between {
            best_between = between;
            best_bin = i;
        }
    }
    lo + best_bin as f32 / scale
}

/// Foreground mask: pixels above the Otsu threshold, with enclosed holes
/// filled so dark interior tissue (cortical bone) stays part of the body.
pub fn foreground_mask(img: &GrayImage) -> Vec<bool> {
    let thr = otsu_threshold(img);
    let bright: Vec<bool> = img.pixels.iter().map(|&v| v > thr).collect();
    fill_holes(&bright, img.height, img.width)
}

/// Everything not 4-connected to the image border through `!mask` pixels
/// becomes foreground.
fn fill_holes(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut outside = vec![false; h * w];
    let mut queue = std::collections::VecDeque::new();
    let mut push = |queue: &mut std::collections::VecDeque<usize>,
                    outside: &mut Vec<bool>,
                    idx: usize| {
        if !mask[idx] && !outside[idx] {
            outside[idx] = true;
            queue.push_back(idx);
        }
    };
    for x in 0..w {
        push(&mut queue, &mut outside, x);
        push(&mut queue, &mut outside, (h - 1) * w + x);
    }
    for y in 0..h {
        push(&mut queue, &mut outside, y * w);
        push(&mut queue, &mut outside, y * w + w - 1);
    }
    while let Some(idx) = queue.pop_front() {
        let (y, x) = (idx / w, idx % w);
        if y > 0 {
            push(&mut queue, &mut outside, idx - w);
        }
        if y + 1 < h {
            push(&mut queue, &mut outside, idx + w);
        }
        if x > 0 {
            push(&mut queue, &mut outside, idx - 1);
        }
        if x + 1 < w {
            push(&mut queue, &mut outside, idx + 1);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// Estimates a smooth multiplicative bias field of mean 1 over the
/// foreground. `spacing` is the control-point spacing of the field
/// smoother in pixels; `clusters` the number of intensity modes assumed
/// during histogram sharpening.
pub fn estimate_bias_field(
    img: &GrayImage,
    iterations: usize,
    spacing: f32,
    clusters: usize,
) -> Result<GrayImage> {
    if img.pixels.iter().all(|&v| v == 0.0) {
        return Err(Error::NoForeground);
    }
    let mask = foreground_mask(img);
    let fg_count = mask.iter().filter(|&&m| m).count();
    if fg_count == 0 {
        return Err(Error::NoForeground);
    }
    // The residual fit uses only bright tissue (above the linear-domain
    // Otsu split): dark interior structures have wide log-modes that would
    // leak anatomy into the field. The smoother interpolates across them.
    let thr = otsu_threshold_linear(img);
    let bright: Vec<bool> = img.pixels.iter().map(|&v| v > thr).collect();
    let n = img.pixels.len();
    let tiny = 1e-6f32;
    let log_img: Vec<f32> = img.pixels.iter().map(|&v| v.max(tiny).ln()).collect();
    let brightf: Vec<f32> = bright.iter().map(|&m| m as u8 as f32).collect();
    let bright_smooth = gaussian_blur(&brightf, img.height, img.width, spacing);

    let mut log_field = vec![0.0f32; n];
    for _ in 0..iterations {
        // Corrected log intensities under the current field estimate.
        let fit_values: Vec<f32> = (0..n)
            .filter(|&i| bright[i])
            .map(|i| log_img[i] - log_field[i])
            .collect();
        let centers = kmeans_1d(&fit_values, clusters.max(1));
        // Residual = distance to the nearest intensity mode; smooth it into
        // a field increment.
        let mut residual = vec![0.0f32; n];
        for i in 0..n {
            if bright[i] {
                let c = log_img[i] - log_field[i];
                residual[i] = c - nearest(&centers, c);
            }
        }
        let res_smooth = gaussian_blur(&residual, img.height, img.width, spacing);
        // The mask floor keeps the normalized convolution from amplifying
        // residual noise far from bright tissue; out there the field decays
        // toward 1 instead.
        for i in 0..n {
            log_field[i] += res_smooth[i] / bright_smooth[i].max(0.1);
        }
    }

    let mut field: Vec<f32> = log_field.iter().map(|&b| b.exp()).collect();
    let mean: f64 = (0..n).filter(|&i| mask[i]).map(|i| field[i] as f64).sum::<f64>()
        / fg_count as f64;
    let inv = (1.0 / mean) as f32;
    for f in &mut field {
        *f *= inv;
    }
    Ok(GrayImage::new(img.height, img.width, field, img.spacing))
}

/// Pixelwise division by a strictly positive field.
pub fn correct_bias(img: &GrayImage, field: &GrayImage) -> Result<GrayImage> {
    require_same_shape(img, field, "correct_bias")?;
    if field.pixels.iter().any(|&v| v <= 0.0) {
        return Err(Error::Config("bias field must be strictly positive".into()));
    }
    let pixels = img.pixels.iter().zip(&field.pixels).map(|(&v, &f)| (v / f).max(0.0)).collect();
    Ok(GrayImage::new(img.height, img.width, pixels, img.spacing))
}

fn nearest(centers: &[f32], v: f32) -> f32 {
    let mut best = centers[0];
    let mut best_d = (v - best).abs();
    for &c in &centers[1..] {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Deterministic 1-d k-means: centers seeded at quantiles of the distinct
/// values (so low-mass intensity modes still get a center), Lloyd updates.
fn kmeans_1d(values: &[f32], k: usize) -> Vec<f32> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k = k.min(distinct.len()).max(1);
    let mut centers: Vec<f32> = (0..k)
        .map(|i| distinct[((i as f64 + 0.5) / k as f64 * distinct.len() as f64) as usize])
        .collect();
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for _ in 0..15 {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        // Values and centers are sorted, so nearest-center assignment is a
        // sweep over the midpoint boundaries (ties go to the lower cluster).
        let mut ci = 0usize;
        for &v in &sorted {
            while ci + 1 < k && v > 0.5 * (centers[ci] + centers[ci + 1]) {
                ci += 1;
            }
            sums[ci] += v as f64;
            counts[ci] += 1;
        }
        let mut moved = 0.0f32;
        for j in 0..k {
            if counts[j] > 0 {
                let c = (sums[j] / counts[j] as f64) as f32;
                moved += (c - centers[j]).abs();
                centers[j] = c;
            }
        }
        centers.sort_by(|a, b| a.partial_cmp(b).expect("finite centers"));
        if moved < 1e-6 {
            break;
        }
    }
    centers
}

/// Separable Gaussian blur with sigma in pixels, truncated at 3 sigma.
/// Borders renormalize over the in-image support.
pub(crate) fn gaussian_blur(data: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        kernel.push((-0.5 * (d / sigma) * (d / sigma)).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    // Horizontal pass.
    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            for xi in lo..=hi {
                let kv = kernel[xi + radius - x] as f64;
                acc += kv * row[xi] as f64;
                wsum += kv;
            }
            tmp[y * w + x] = (acc / wsum) as f32;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; data.len()];
    for x in 0..w {
        for y in 0..h {
            let mut acc = 0.0f64;
            let mut wsum = 0.0f64;
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for yi in lo..=hi {
                let kv = kernel[yi + radius - y] as f64;
                acc += kv * tmp[yi * w + x] as f64;
                wsum += kv;
            }
            out[y * w + x] = (acc / wsum) as f32;
        }
    }
    out
}
