//! Edge-preserving denoising: Perona–Malik anisotropic diffusion with the
//! exponential conductance g(d) = exp(-(d/kappa)^2) and zero-flux borders.

use crate::error::{Error, Result};
use crate::preprocess::GrayImage;

pub fn denoise_diffusion(
    img: &GrayImage,
    iterations: usize,
    kappa: f32,
    lambda: f32,
) -> Result<GrayImage> {
    if !(lambda > 0.0 && lambda <= 0.25) {
        return Err(Error::Config(format!(
            "diffusion lambda {lambda} outside the stable range (0, 0.25]"
        )));
    }
    if kappa <= 0.0 {
        return Err(Error::Config(format!("diffusion kappa {kappa} must be positive")));
    }
    let (h, w) = (img.height, img.width);
    let inv_k2 = 1.0 / (kappa * kappa);
    let flux = |d: f32| (-d * d * inv_k2).exp() * d;

    let mut cur = img.pixels.clone();
    let mut next = vec![0.0f32; cur.len()];
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let c = cur[y * w + x];
                let north = if y > 0 { cur[(y - 1) * w + x] - c } else { 0.0 };
                let south = if y + 1 < h { cur[(y + 1) * w + x] - c } else { 0.0 };
                let west = if x > 0 { cur[y * w + x - 1] - c } else { 0.0 };
                let east = if x + 1 < w { cur[y * w + x + 1] - c } else { 0.0 };
                let update = flux(north) + flux(south) + flux(west) + flux(east);
                next[y * w + x] = (c + lambda * update).max(0.0);
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(GrayImage::new(h, w, cur, img.spacing))
}
