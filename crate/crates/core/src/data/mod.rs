//! Dataset model: multi-contrast slices, tissue label maps, the synthetic
//! thigh-phantom corpus, volume I/O, and leakage-safe subject-level splits.

mod phantom;
mod splits;
mod volume;

pub use phantom::{generate_phantom, make_corpus, PhantomParams};
pub use splits::{make_splits, FoldSplit, SplitPlan};
pub use volume::{load_corpus, load_volume, save_corpus, save_volume, volume_bytes, MCSL_MAGIC, MCSL_VERSION};

use std::collections::BTreeSet;

use crate::preprocess::GrayImage;

/// Tissue class ids. IMAT is the scarcely-annotated class driving the
/// semi-supervised protocol.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_MUSCLE: u8 = 1;
pub const CLASS_FAT: u8 = 2;
pub const CLASS_IMAT: u8 = 3;
pub const CLASS_BONE: u8 = 4;
pub const CLASS_MARROW: u8 = 5;
pub const NUM_CLASSES: usize = 6;

/// Label value reserved for "no annotation" pixels in loss computation.
pub const IGNORE_LABEL: u8 = 255;

pub const CLASS_NAMES: [&str; NUM_CLASSES] =
    ["background", "muscle", "fat", "imat", "bone", "bone_marrow"];

/// Channel semantics are fixed by index.
pub const CH_WATER_AND_FAT: usize = 0;
pub const CH_FAT_SUPPRESSED: usize = 1;
pub const CH_WATER_SUPPRESSED: usize = 2;
pub const CONTRAST_NAMES: [&str; 3] = ["water_and_fat", "fat_suppressed", "water_suppressed"];

/// Three co-registered contrasts of one anatomical slice.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiContrastSlice {
    pub channels: [GrayImage; 3],
    pub subject_id: String,
    pub slice_index: u32,
    pub spacing: (f32, f32),
}

impl MultiContrastSlice {
    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn width(&self) -> usize {
        self.channels[0].width
    }
}

/// Per-pixel tissue classes plus the set of classes that were actually
/// annotated (IMAT-unlabeled scans carry labels without class 3).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u8>,
    pub annotated_classes: BTreeSet<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>, annotated: BTreeSet<u8>) -> Self {
        assert_eq!(classes.len(), height * width);
        debug_assert!(
            classes.iter().all(|c| (*c as usize) < NUM_CLASSES),
            "label value outside the class enum"
        );
        debug_assert!(
            annotated.contains(&CLASS_IMAT)
                || classes.iter().all(|&c| c != CLASS_IMAT),
            "IMAT pixels present but IMAT not annotated"
        );
        LabelMap { height, width, classes, annotated_classes: annotated }
    }

    pub fn all_annotated(height: usize, width: usize, classes: Vec<u8>) -> Self {
        LabelMap::new(height, width, classes, (0..NUM_CLASSES as u8).collect())
    }

    /// Copy with IMAT merged into muscle and removed from the annotated set.
    pub fn without_imat(&self) -> LabelMap {
        let classes = self
            .classes
            .iter()
            .map(|&c| if c == CLASS_IMAT { CLASS_MUSCLE } else { c })
            .collect();
        let mut annotated = self.annotated_classes.clone();
        annotated.remove(&CLASS_IMAT);
        LabelMap::new(self.height, self.width, classes, annotated)
    }

    pub fn contains_class(&self, class: u8) -> bool {
        self.classes.iter().any(|&c| c == class)
    }
}

/// Who produced a stored label map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Expert,
    Pseudo,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Expert => "expert",
            Provenance::Pseudo => "pseudo",
        }
    }
}

/// One corpus slice: image, stored annotation, and (for phantom corpora)
/// the hidden full ground truth used only for evaluation.
#[derive(Debug, Clone)]
pub struct SliceRecord {
    pub image: MultiContrastSlice,
    pub label: Option<LabelMap>,
    /// Full 6-class truth the models never train on; evaluation only.
    pub hidden_truth: Option<LabelMap>,
    pub provenance: Provenance,
    pub labeled_flag: bool,
}

/// Slice collection plus subject bookkeeping.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub slices: Vec<SliceRecord>,
    pub subjects: Vec<String>,
    /// Divisor applied when tensorizing intensities (1 for raw phantoms,
    /// 4095 for standardized corpora).
    pub intensity_scale: f32,
}

impl Dataset {
    pub fn slice_indices_of(&self, subjects: &[String]) -> Vec<usize> {
        self.slices
            .iter()
            .enumerate()
            .filter(|(_, s)| subjects.contains(&s.image.subject_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Subjects whose stored labels include IMAT (the "expert-labeled" set
    /// of the semi-supervised protocol).
    pub fn imat_labeled_subjects(&self) -> Vec<String> {
        self.subjects
            .iter()
            .filter(|subj| {
                self.slices.iter().any(|s| {
                    s.image.subject_id == **subj
                        && s.label
                            .as_ref()
                            .map(|l| l.annotated_classes.contains(&CLASS_IMAT))
                            .unwrap_or(false)
                })
            })
            .cloned()
            .collect()
    }

    pub fn imat_unlabeled_subjects(&self) -> Vec<String> {
        let labeled = self.imat_labeled_subjects();
        self.subjects.iter().filter(|s| !labeled.contains(s)).cloned().collect()
    }
}

#[cfg(test)]
mod tests;
