//! Synthetic multi-contrast thigh-phantom generator.
//!
//! Each slice holds two roughly circular thigh cross-sections: an outer
//! subcutaneous-fat ring, an inner muscle disk with IMAT speckles and
//! streaks, and an off-center bone disk with a marrow core. Channel
//! intensities follow the contrast semantics (fat bright in water-and-fat
//! and water-suppressed, dark in fat-suppressed; muscle the other way
//! around), optionally corrupted by Gaussian noise and a smooth
//! multiplicative bias field.

use std::collections::BTreeSet;
use std::f32::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{
    Dataset, LabelMap, MultiContrastSlice, Provenance, SliceRecord, CLASS_BONE, CLASS_FAT,
    CLASS_IMAT, CLASS_MARROW, CLASS_MUSCLE, NUM_CLASSES,
};
use crate::dropout::standard_normal;
use crate::error::{Error, Result};
use crate::preprocess::GrayImage;
use crate::{derive_seed, seeded_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub image_size: usize,
    /// Gaussian intensity noise sigma (0 disables).
    pub noise_sigma: f32,
    /// Peak deviation of the multiplicative bias field (0 disables).
    pub bias_strength: f32,
    /// IMAT speckles per thigh.
    pub imat_speckles: usize,
    /// Nominal intensity per class (rows) and contrast channel (columns).
    pub intensity_lut: [[f32; 3]; NUM_CLASSES],
    pub spacing_mm: (f32, f32),
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            image_size: 64,
            noise_sigma: 0.04,
            bias_strength: 0.15,
            imat_speckles: 14,
            intensity_lut: [
                [0.02, 0.02, 0.02], // background
                [0.75, 0.80, 0.10], // muscle
                [0.85, 0.12, 0.85], // subcutaneous fat
                [0.85, 0.12, 0.85], // IMAT (fat signature; geometry disambiguates)
                [0.15, 0.18, 0.30], // cortical bone
                [0.68, 0.22, 0.62], // bone marrow
            ],
            spacing_mm: (1.0, 1.0),
        }
    }
}

struct ThighGeometry {
    center: (f32, f32),
    outer_radius: f32,
    wobble: [(f32, f32); 2], // (amplitude, phase) for 2nd/3rd harmonics
    bone_center: (f32, f32),
    bone_radius: f32,
    marrow_radius: f32,
    /// (y, x, radius) IMAT speckles, all inside the muscle region.
    speckles: Vec<(f32, f32, f32)>,
    /// (mid radius, theta0, span, half width) fascia-hugging IMAT streaks.
    streaks: Vec<(f32, f32, f32, f32)>,
}

impl ThighGeometry {
    fn sample(rng: &mut Rng, center_x: f32, center_y: f32, size: f32, speckles: usize) -> Self {
        let outer_radius = size * (0.21 + rng.gen_range(-0.008..0.008f32));
        let muscle_radius = 0.8 * outer_radius;
        let bone_radius = 0.3 * outer_radius;
        let bone_offset = rng.gen_range(0.0..0.18 * outer_radius);
        let bone_angle = rng.gen_range(0.0..2.0 * PI);
        let bone_center = (
            center_y + bone_offset * bone_angle.sin(),
            center_x + bone_offset * bone_angle.cos(),
        );
        let mut speckle_list = Vec::new();
        let mut attempts = 0;
        while speckle_list.len() < speckles && attempts < speckles * 20 {
            attempts += 1;
            let r = rng.gen_range(0.0..0.82 * muscle_radius);
            let theta = rng.gen_range(0.0..2.0 * PI);
            let radius = rng.gen_range(1.0..2.6f32);
            let y = center_y + r * theta.sin();
            let x = center_x + r * theta.cos();
            // Keep speckles strictly inside muscle and clear of the bone.
            let bone_d = ((y - bone_center.0).powi(2) + (x - bone_center.1).powi(2)).sqrt();
            if r + radius < 0.9 * muscle_radius && bone_d > bone_radius + radius + 1.5 {
                speckle_list.push((y, x, radius));
            }
        }
        let streaks = (0..2)
            .map(|_| {
                (
                    0.9 * muscle_radius,
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.5..1.3f32),
                    rng.gen_range(0.6..1.1f32),
                )
            })
            .collect();
        ThighGeometry {
            center: (center_y, center_x),
            outer_radius,
            wobble: [
                (rng.gen_range(0.0..0.05), rng.gen_range(0.0..2.0 * PI)),
                (rng.gen_range(0.0..0.035), rng.gen_range(0.0..2.0 * PI)),
            ],
            bone_center,
            bone_radius,
            marrow_radius: 0.6 * bone_radius,
            speckles: speckle_list,
            streaks,
        }
    }

    fn outer_at(&self, theta: f32) -> f32 {
        self.outer_radius
            * (1.0
                + self.wobble[0].0 * (2.0 * theta + self.wobble[0].1).sin()
                + self.wobble[1].0 * (3.0 * theta + self.wobble[1].1).sin())
    }

    fn muscle_at(&self, theta: f32) -> f32 {
        0.8 * self.outer_at(theta)
    }
}

/// Per-subject anatomy: stable across that subject's slices.
pub(crate) struct SubjectAnatomy {
    thighs: [ThighGeometry; 2],
}

pub(crate) fn subject_anatomy(seed: u64, params: &PhantomParams) -> Result<SubjectAnatomy> {
    let size = params.image_size as f32;
    let mut rng = seeded_rng(seed);
    let cy = size / 2.0 + rng.gen_range(-0.03 * size..0.03 * size);
    let left = ThighGeometry::sample(&mut rng, 0.25 * size, cy, size, params.imat_speckles);
    let right = ThighGeometry::sample(&mut rng, 0.75 * size, cy, size, params.imat_speckles);
    for t in [&left, &right] {
        let max_r = t.outer_radius * 1.1;
        if t.center.0 - max_r < 0.0
            || t.center.0 + max_r >= size
            || t.center.1 - max_r < 0.0
            || t.center.1 + max_r >= size
        {
            return Err(Error::Config(format!(
                "phantom geometry infeasible: radius {max_r:.1} exceeds image size {size}"
            )));
        }
        if t.marrow_radius < 0.9 {
            return Err(Error::Config(format!(
                "phantom geometry infeasible: marrow radius {:.2} px cannot be rasterized at image size {size}",
                t.marrow_radius
            )));
        }
    }
    Ok(SubjectAnatomy { thighs: [left, right] })
}

fn rasterize_labels(anatomy: &SubjectAnatomy, size: usize) -> LabelMap {
    let mut classes = vec![0u8; size * size];
    for thigh in &anatomy.thighs {
        for y in 0..size {
            for x in 0..size {
                let dy = y as f32 - thigh.center.0;
                let dx = x as f32 - thigh.center.1;
                let r = (dy * dy + dx * dx).sqrt();
                let theta = dy.atan2(dx);
                let outer = thigh.outer_at(theta);
                if r > outer {
                    continue;
                }
                let idx = y * size + x;
                let muscle_r = thigh.muscle_at(theta);
                if r > muscle_r {
                    classes[idx] = CLASS_FAT;
                    continue;
                }
                classes[idx] = CLASS_MUSCLE;
                // IMAT inside the muscle region.
                for &(sy, sx, sr) in &thigh.speckles {
                    if (y as f32 - sy).powi(2) + (x as f32 - sx).powi(2) <= sr * sr {
                        classes[idx] = CLASS_IMAT;
                    }
                }
                for &(mid, theta0, span, halfw) in &thigh.streaks {
                    let mut dtheta = theta - theta0;
                    while dtheta > PI {
                        dtheta -= 2.0 * PI;
                    }
                    while dtheta < -PI {
                        dtheta += 2.0 * PI;
                    }
                    if (r - mid).abs() <= halfw && dtheta.abs() <= span / 2.0 {
                        classes[idx] = CLASS_IMAT;
                    }
                }
                // Bone overwrites muscle/IMAT; marrow sits inside bone.
                let bd = ((y as f32 - thigh.bone_center.0).powi(2)
                    + (x as f32 - thigh.bone_center.1).powi(2))
                .sqrt();
                if bd <= thigh.bone_radius {
                    classes[idx] =
                        if bd <= thigh.marrow_radius { CLASS_MARROW } else { CLASS_BONE };
                }
            }
        }
    }
    LabelMap::all_annotated(size, size, classes)
}

/// Geometry containment required of every generated slice: bone inside the
/// thigh interior, marrow inside bone, IMAT inside the muscle region.
pub fn check_containment(anatomy: &SubjectAnatomy, labels: &LabelMap) -> Result<()> {
    let size = labels.width;
    for y in 0..size {
        for x in 0..size {
            let class = labels.classes[y * size + x];
            if class == 0 || class == CLASS_FAT {
                continue;
            }
            let inside = |predicate: &dyn Fn(&ThighGeometry, f32, f32, f32) -> bool| {
                anatomy.thighs.iter().any(|t| {
                    let dy = y as f32 - t.center.0;
                    let dx = x as f32 - t.center.1;
                    let r = (dy * dy + dx * dx).sqrt();
                    let theta = dy.atan2(dx);
                    predicate(t, r, theta, ((y as f32 - t.bone_center.0).powi(2)
                        + (x as f32 - t.bone_center.1).powi(2))
                    .sqrt())
                })
            };
            let ok = match class {
                CLASS_BONE => inside(&|t, r, theta, _| r <= t.outer_at(theta)),
                CLASS_MARROW => inside(&|t, _, _, bd| bd <= t.bone_radius),
                CLASS_IMAT => inside(&|t, r, theta, bd| {
                    r < t.muscle_at(theta) && bd > t.marrow_radius
                }),
                _ => true,
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "containment violated for class {class} at ({y}, {x})"
                )));
            }
        }
    }
    Ok(())
}

/// Smooth multiplicative bias field, mean roughly 1, peak deviation
/// `strength`. Exactly 1 everywhere when `strength` is 0.
fn bias_field(size: usize, strength: f32, rng: &mut Rng) -> Vec<f32> {
    if strength == 0.0 {
        return vec![1.0; size * size];
    }
    let phase_x = rng.gen_range(0.0..2.0 * PI);
    let phase_y = rng.gen_range(0.0..2.0 * PI);
    let mut field = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let fx = (PI * x as f32 / size as f32 + phase_x).sin();
            let fy = (PI * y as f32 / size as f32 + phase_y).sin();
            field[y * size + x] = 1.0 + strength * fx * fy;
        }
    }
    field
}

/// Generates one slice and its full 6-class ground truth. Deterministic in
/// the rng state.
pub fn generate_phantom(rng: &mut Rng, params: &PhantomParams) -> Result<(MultiContrastSlice, LabelMap)> {
    let anatomy = subject_anatomy(rng.gen(), params)?;
    generate_slice_for(&anatomy, rng, params, "adhoc".into(), 0)
}

pub(crate) fn generate_slice_for(
    anatomy: &SubjectAnatomy,
    rng: &mut Rng,
    params: &PhantomParams,
    subject_id: String,
    slice_index: u32,
) -> Result<(MultiContrastSlice, LabelMap)> {
    let size = params.image_size;
    let labels = rasterize_labels(anatomy, size);
    check_containment(anatomy, &labels)?;

    let mut channels = Vec::with_capacity(3);
    for ch in 0..3 {
        let field = bias_field(size, params.bias_strength, rng);
        let noise = if params.noise_sigma > 0.0 {
            standard_normal(size * size, rng)
        } else {
            vec![0.0; size * size]
        };
        let pixels: Vec<f32> = labels
            .classes
            .iter()
            .zip(field.iter().zip(&noise))
            .map(|(&class, (&f, &n))| {
                let nominal = params.intensity_lut[class as usize][ch];
                (nominal * f + params.noise_sigma * n).max(0.0)
            })
            .collect();
        channels.push(GrayImage::new(size, size, pixels, params.spacing_mm));
    }
    let slice = MultiContrastSlice {
        channels: channels.try_into().expect("three channels"),
        subject_id,
        slice_index,
        spacing: params.spacing_mm,
    };
    Ok((slice, labels))
}

/// Builds a corpus of `n_subjects` subjects with `slices_per_subject`
/// slices each. A fraction of subjects keeps expert IMAT labels; for the
/// rest the stored maps merge IMAT into muscle (the hidden full truth is
/// retained for evaluation only).
pub fn make_corpus(
    seed: u64,
    n_subjects: usize,
    slices_per_subject: usize,
    imat_labeled_fraction: f64,
    params: &PhantomParams,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&imat_labeled_fraction) {
        return Err(Error::Config(format!(
            "imat_labeled_fraction {imat_labeled_fraction} outside [0, 1]"
        )));
    }
    let subjects: Vec<String> = (0..n_subjects).map(|i| format!("S{:03}", i + 1)).collect();
    let n_labeled = (imat_labeled_fraction * n_subjects as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_subjects).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded_rng(derive_seed(seed, 0xA11)));
    }
    let labeled: BTreeSet<usize> = order.into_iter().take(n_labeled).collect();

    let mut slices = Vec::with_capacity(n_subjects * slices_per_subject);
    for (si, subject) in subjects.iter().enumerate() {
        let anatomy = subject_anatomy(derive_seed(seed, 0x5_0000 + si as u64), params)?;
        let mut slice_rng = seeded_rng(derive_seed(seed, 0x6_0000 + si as u64));
        for k in 0..slices_per_subject {
            let (image, full) =
                generate_slice_for(&anatomy, &mut slice_rng, params, subject.clone(), k as u32)?;
            let stored = if labeled.contains(&si) { full.clone() } else { full.without_imat() };
            slices.push(SliceRecord {
                image,
                label: Some(stored),
                hidden_truth: Some(full),
                provenance: Provenance::Expert,
                labeled_flag: true,
            });
        }
    }
    Ok(Dataset { slices, subjects, intensity_scale: 1.0 })
}
