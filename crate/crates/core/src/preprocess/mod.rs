//! Three-stage intensity preprocessing: multiplicative bias-field
//! correction, edge-preserving diffusion denoising, and landmark-based
//! standardization onto [1, 4095]. The stage order is fixed — bias removal
//! amplifies noise, so denoising runs after it and standardization last.

mod bias;
mod diffusion;
mod standardize;

pub use bias::{correct_bias, estimate_bias_field, otsu_threshold};
pub use diffusion::denoise_diffusion;
pub use standardize::{standardize, standardize_value, train_scale, StandardScale};

use serde::{Deserialize, Serialize};

use crate::data::MultiContrastSlice;
use crate::error::{Error, Result};

/// Single-channel float image with physical pixel spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub spacing: (f32, f32),
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, spacing: (f32, f32)) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count does not match {height}x{width}");
        debug_assert!(pixels.iter().all(|v| v.is_finite() && *v >= 0.0), "invalid intensities");
        GrayImage { height, width, pixels, spacing }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        GrayImage::new(height, width, vec![value; height * width], (1.0, 1.0))
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Tunables of the preprocessing chain. The source publication leaves the
/// bias/diffusion parameters unstated, so they are exposed here and logged
/// with every run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub bias_iterations: usize,
    /// Control-point spacing (in pixels) of the low-pass field smoother.
    pub bias_spacing: f32,
    /// Intensity clusters used to sharpen the log-histogram per iteration.
    pub bias_clusters: usize,
    pub diffusion_iterations: usize,
    /// Conductance scale of the exponential edge-stopping function.
    pub diffusion_kappa: f32,
    /// Explicit-scheme time step; stability requires (0, 0.25].
    pub diffusion_lambda: f32,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            bias_iterations: 12,
            bias_spacing: 8.0,
            bias_clusters: 6,
            diffusion_iterations: 8,
            diffusion_kappa: 0.15,
            diffusion_lambda: 0.2,
        }
    }
}

/// Per-channel record of the stages applied, in order.
pub type StageLog = Vec<(usize, &'static str)>;

/// Runs bias-correct → denoise → standardize on every channel of a slice.
/// `scales` must have been trained per contrast on training-fold images only.
pub fn preprocess_slice(
    slice: &MultiContrastSlice,
    scales: &[StandardScale; 3],
    params: &PreprocessParams,
) -> Result<(MultiContrastSlice, StageLog)> {
    let mut out = slice.clone();
    let mut log = StageLog::new();
    for (ch, scale) in scales.iter().enumerate() {
        let img = &out.channels[ch];
        let field = estimate_bias_field(img, params.bias_iterations, params.bias_spacing, params.bias_clusters)?;
        let corrected = correct_bias(img, &field)?;
        log.push((ch, "bias"));
        let denoised = denoise_diffusion(
            &corrected,
            params.diffusion_iterations,
            params.diffusion_kappa,
            params.diffusion_lambda,
        )?;
        log.push((ch, "denoise"));
        let standardized = standardize(&denoised, scale)?;
        log.push((ch, "standardize"));
        out.channels[ch] = standardized;
    }
    Ok((out, log))
}

pub(crate) fn require_same_shape(a: &GrayImage, b: &GrayImage, op: &'static str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    Ok(())
}
