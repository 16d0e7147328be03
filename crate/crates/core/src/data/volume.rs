//! On-disk slice format (MCSL) and corpus manifest I/O.
//!
//! One file per slice: a 16-byte header (magic "MCSL", u32 version, u32 H,
//! u32 W, little-endian) followed by three float32 channel planes and one
//! u8 label plane. The manifest is plain text, one record per slice:
//! `path,subject_id,slice_index,labeled_flag,provenance,annotated_classes`,
//! with corpus-level metadata (intensity scale, spacing) in `#` header
//! lines. Hidden full ground truth, when present, lives under `hidden/`
//! with the same file name.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::data::{
    Dataset, LabelMap, MultiContrastSlice, Provenance, SliceRecord, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::preprocess::GrayImage;

pub const MCSL_MAGIC: &[u8; 4] = b"MCSL";
pub const MCSL_VERSION: u32 = 1;

/// Serializes one slice (and labels) to the MCSL byte layout.
pub fn volume_bytes(slice: &MultiContrastSlice, labels: &LabelMap) -> Vec<u8> {
    let (h, w) = (slice.height(), slice.width());
    assert_eq!((labels.height, labels.width), (h, w), "label shape mismatch");
    let mut buf = Vec::with_capacity(16 + 3 * 4 * h * w + h * w);
    buf.extend_from_slice(MCSL_MAGIC);
    buf.extend_from_slice(&MCSL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for ch in &slice.channels {
        for v in &ch.pixels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&labels.classes);
    buf
}

pub fn save_volume(path: &Path, slice: &MultiContrastSlice, labels: &LabelMap) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&volume_bytes(slice, labels)).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), offset, detail: detail.into() }
}

/// Reads one MCSL file back. Labels get the full annotated set; the caller
/// adjusts it from manifest metadata.
pub fn load_volume(path: &Path) -> Result<(MultiContrastSlice, LabelMap)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(parse_err(path, bytes.len() as u64, "truncated header (16 bytes required)"));
    }
    if &bytes[0..4] != MCSL_MAGIC {
        return Err(parse_err(path, 0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MCSL_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {version}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if h == 0 || w == 0 || h > 1 << 16 || w > 1 << 16 {
        return Err(parse_err(path, 8, format!("implausible dimensions {h}x{w}")));
    }
    let plane = h * w;
    let expect = 16 + 3 * 4 * plane + plane;
    if bytes.len() != expect {
        return Err(parse_err(
            path,
            bytes.len() as u64,
            format!("file is {} bytes, expected {expect}", bytes.len()),
        ));
    }
    let mut channels = Vec::with_capacity(3);
    let mut off = 16usize;
    for _ in 0..3 {
        let mut pixels = Vec::with_capacity(plane);
        for i in 0..plane {
            let b = &bytes[off + 4 * i..off + 4 * i + 4];
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(path, (off + 4 * i) as u64, format!("invalid intensity {v}")));
            }
            pixels.push(v);
        }
        off += 4 * plane;
        channels.push(GrayImage::new(h, w, pixels, (1.0, 1.0)));
    }
    let mut classes = Vec::with_capacity(plane);
    for i in 0..plane {
        let c = bytes[off + i];
        if c as usize >= NUM_CLASSES {
            return Err(parse_err(
                path,
                (off + i) as u64,
                format!("label value {c} outside the class range 0..{NUM_CLASSES}"),
            ));
        }
        classes.push(c);
    }
    let slice = MultiContrastSlice {
        channels: channels.try_into().expect("three channels"),
        subject_id: String::new(),
        slice_index: 0,
        spacing: (1.0, 1.0),
    };
    Ok((slice, LabelMap::all_annotated(h, w, classes)))
}

fn annotated_to_str(set: &BTreeSet<u8>) -> String {
    set.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes the corpus: `slices/*.mcsl`, optional `hidden/*.mcsl` full-truth
/// files, and `manifest.txt`.
pub fn save_corpus(dataset: &Dataset, dir: &Path) -> Result<()> {
    let slices_dir = dir.join("slices");
    fs::create_dir_all(&slices_dir).map_err(|e| Error::io(&slices_dir, e))?;
    let hidden_dir = dir.join("hidden");
    if dataset.slices.iter().any(|s| s.hidden_truth.is_some()) {
        fs::create_dir_all(&hidden_dir).map_err(|e| Error::io(&hidden_dir, e))?;
    }
    let mut manifest = String::new();
    manifest.push_str("# thighseg corpus manifest v1\n");
    manifest.push_str(&format!("# intensity_scale={}\n", dataset.intensity_scale));
    if let Some(first) = dataset.slices.first() {
        manifest.push_str(&format!(
            "# spacing_mm={}x{}\n",
            first.image.spacing.0, first.image.spacing.1
        ));
    }
    manifest.push_str("path,subject_id,slice_index,labeled_flag,provenance,annotated_classes\n");
    for rec in &dataset.slices {
        let name = format!("{}_{:03}.mcsl", rec.image.subject_id, rec.image.slice_index);
        let label = rec
            .label
            .as_ref()
            .ok_or_else(|| Error::Contract("save_corpus requires labeled slices".into()))?;
        save_volume(&slices_dir.join(&name), &rec.image, label)?;
        if let Some(hidden) = &rec.hidden_truth {
            save_volume(&hidden_dir.join(&name), &rec.image, hidden)?;
        }
        manifest.push_str(&format!(
            "slices/{},{},{},{},{},{}\n",
            name,
            rec.image.subject_id,
            rec.image.slice_index,
            rec.labeled_flag as u8,
            rec.provenance.as_str(),
            annotated_to_str(&label.annotated_classes),
        ));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// Loads a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut intensity_scale = 1.0f32;
    let mut spacing = (1.0f32, 1.0f32);
    let mut slices = Vec::new();
    let mut subjects = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("path,") {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("intensity_scale=") {
                intensity_scale = v.parse().map_err(|_| {
                    parse_err(&mpath, lineno as u64, format!("bad intensity_scale {v}"))
                })?;
            } else if let Some(v) = rest.strip_prefix("spacing_mm=") {
                let parts: Vec<&str> = v.split('x').collect();
                if parts.len() == 2 {
                    spacing = (
                        parts[0].parse().unwrap_or(1.0),
                        parts[1].parse().unwrap_or(1.0),
                    );
                }
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(
                &mpath,
                lineno as u64,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let rel: PathBuf = fields[0].into();
        let path = dir.join(&rel);
        let (mut image, mut label) = load_volume(&path)?;
        image.subject_id = fields[1].to_string();
        image.slice_index = fields[2]
            .parse()
            .map_err(|_| parse_err(&mpath, lineno as u64, "bad slice index"))?;
        image.spacing = spacing;
        for ch in image.channels.iter_mut() {
            ch.spacing = spacing;
        }
        let labeled_flag = fields[3] == "1";
        let provenance = match fields[4] {
            "expert" => Provenance::Expert,
            "pseudo" => Provenance::Pseudo,
            other => {
                return Err(parse_err(&mpath, lineno as u64, format!("bad provenance {other}")))
            }
        };
        let annotated: BTreeSet<u8> = if fields[5].is_empty() {
            BTreeSet::new()
        } else {
            fields[5]
                .split(';')
                .map(|s| {
                    s.parse::<u8>()
                        .map_err(|_| parse_err(&mpath, lineno as u64, format!("bad class id {s}")))
                })
                .collect::<Result<_>>()?
        };
        label.annotated_classes = annotated;
        let hidden_path = dir.join("hidden").join(rel.file_name().unwrap());
        let hidden_truth = if hidden_path.exists() {
            let (_, hidden) = load_volume(&hidden_path)?;
            Some(hidden)
        } else {
            None
        };
        if !subjects.contains(&image.subject_id) {
            subjects.push(image.subject_id.clone());
        }
        slices.push(SliceRecord {
            image,
            label: Some(label),
            hidden_truth,
            provenance,
            labeled_flag,
        });
    }
    Ok(Dataset { slices, subjects, intensity_scale })
}
