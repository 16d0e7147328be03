//! Minimal portable-anymap writers (binary PGM/PPM) for QC images and
//! colored label overlays.

use crate::data::LabelMap;
use crate::preprocess::GrayImage;

/// Tissue palette (RGB): background black, muscle green, fat blue,
/// IMAT red, bone orange, bone marrow brown.
pub const PALETTE: [[u8; 3]; 6] = [
    [0, 0, 0],
    [0, 160, 0],
    [40, 90, 255],
    [230, 30, 30],
    [255, 165, 0],
    [139, 69, 19],
];

/// 8-bit binary PGM of a gray image, linearly scaled from its value range.
pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8));
    out
}

/// Binary PPM of a label map using the tissue palette.
pub fn label_ppm_bytes(labels: &LabelMap) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    for &c in &labels.classes {
        out.extend_from_slice(&PALETTE[c as usize]);
    }
    out
}

/// PPM of a gray channel with the label overlay alpha-blended on top.
pub fn overlay_ppm_bytes(img: &GrayImage, labels: &LabelMap, alpha: f32) -> Vec<u8> {
    let (lo, hi) = img
        .pixels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for (i, &v) in img.pixels.iter().enumerate() {
        let gray = (v - lo) / span * 255.0;
        let color = PALETTE[labels.classes[i] as usize];
        for ch in 0..3 {
            let blended = if labels.classes[i] == 0 {
                gray
            } else {
                gray * (1.0 - alpha) + color[ch] as f32 * alpha
            };
            out.push(blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_dimensions_match_input() {
        let labels = LabelMap::all_annotated(3, 5, vec![0; 15]);
        let bytes = label_ppm_bytes(&labels);
        let header: Vec<u8> = b"P6\n5 3\n255\n".to_vec();
        assert!(bytes.starts_with(&header));
        assert_eq!(bytes.len(), header.len() + 3 * 15);
    }

    #[test]
    fn pgm_scales_into_byte_range() {
        let img = GrayImage::new(2, 2, vec![0.0, 1.0, 2.0, 4.0], (1.0, 1.0));
        let bytes = pgm_bytes(&img);
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 64, 128, 255]);
    }
}
