//! Dataset layout, image decoding and the synthetic generator.
//!
//! Datasets follow the MVTec directory convention:
//!
//! ```text
//! <root>/<class>/train/good/*.ppm
//! <root>/<class>/test/good/*.ppm
//! <root>/<class>/test/<defect>/*.ppm
//! <root>/ground_truth/<class>/<defect>/<stem>_mask.pgm
//! ```
//!
//! Masks are also found under `<root>/<class>/ground_truth/<defect>/`, the
//! placement used by the original MVTec archives once converted to PNM.

mod pnm;
mod synth;
mod transform;

pub use pnm::{decode_pnm, encode_pnm, RawImage};
pub use synth::{
    generate_synthetic, render_anomaly, render_normal, DefectKind, SynthConfig, SynthSample, SynthSummary,
    TextureParams,
};
pub use transform::{augment, normalize, AugmentConfig, NormStats};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::PixelMask;
use crate::tensor::{resize_bilinear, resize_nearest, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub class: String,
    pub split: Split,
    pub anomalous: bool,
    /// `good` for normal images.
    pub defect_type: String,
    pub image_path: PathBuf,
    /// Present for every anomalous test image; normal masks are all zero.
    pub mask_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub records: Vec<Record>,
    /// Non-fatal problems found while indexing.
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["ppm", "pgm", "pnm"];
const GOOD: &str = "good";

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect())
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find_mask(root: &Path, class: &str, defect: &str, image: &Path) -> Result<PathBuf> {
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let candidates = [
        root.join("ground_truth").join(class).join(defect),
        root.join(class).join("ground_truth").join(defect),
    ];
    for dir in &candidates {
        for ext in ["pgm", "pnm"] {
            let p = dir.join(format!("{stem}_mask.{ext}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(Error::Index(format!(
        "no ground-truth mask for {} (looked for {stem}_mask.pgm in {} and {})",
        image.display(),
        candidates[0].display(),
        candidates[1].display()
    )))
}

/// Indexes an MVTec-style tree. Classes and files are in lexicographic order.
pub fn load_layout(root: &Path) -> Result<DatasetIndex> {
    let mut index = DatasetIndex {
        root: root.to_path_buf(),
        ..Default::default()
    };
    for class_dir in subdirs(root)? {
        let class = file_name(&class_dir);
        if class == "ground_truth" || class.starts_with('.') {
            continue;
        }
        let mut records = Vec::new();
        let train_dir = class_dir.join("train").join(GOOD);
        if train_dir.is_dir() {
            for image_path in images_in(&train_dir)? {
                records.push(Record {
                    class: class.clone(),
                    split: Split::Train,
                    anomalous: false,
                    defect_type: GOOD.into(),
                    image_path,
                    mask_path: None,
                });
            }
        }
        let test_dir = class_dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in subdirs(&test_dir)? {
                let defect = file_name(&defect_dir);
                let anomalous = defect != GOOD;
                for image_path in images_in(&defect_dir)? {
                    let mask_path = if anomalous {
                        Some(find_mask(root, &class, &defect, &image_path)?)
                    } else {
                        None
                    };
                    records.push(Record {
                        class: class.clone(),
                        split: Split::Test,
                        anomalous,
                        defect_type: defect.clone(),
                        image_path,
                        mask_path,
                    });
                }
            }
        }
        if records.is_empty() {
            index.warnings.push(format!("class {class} has no images; skipped"));
            continue;
        }
        index.classes.push(class);
        index.records.extend(records);
    }
    Ok(index)
}

impl DatasetIndex {
    /// Normal training images of every class, as one pooled list.
    pub fn train(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.split == Split::Train && !r.anomalous)
    }

    pub fn test(&self) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    pub fn test_of<'a>(&'a self, class: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.test().filter(move |r| r.class == class)
    }

    /// Keeps only the named classes.
    pub fn restrict(&mut self, classes: &[String]) -> Result<()> {
        if let Some(missing) = classes.iter().find(|c| !self.classes.contains(c)) {
            return Err(Error::Index(format!("class {missing} is not in the dataset")));
        }
        self.classes.retain(|c| classes.contains(c));
        self.records.retain(|r| classes.contains(&r.class));
        Ok(())
    }

    /// SHA-256 over relative paths and file contents, in index order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in &self.records {
            for p in std::iter::once(&r.image_path).chain(r.mask_path.as_ref()) {
                let rel = p.strip_prefix(&self.root).unwrap_or(p);
                h.update(rel.to_string_lossy().as_bytes());
                h.update([0]);
                h.update(fs::read(p).map_err(|e| Error::io(p, e))?);
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }
}

fn read_pnm(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads an image as `[3, size, size]` on `[0, 1]`. Gray images are
/// replicated across channels; other sizes are resampled bilinearly.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let raw = read_pnm(path)?;
    let mut t = raw.to_tensor();
    if raw.channels == 1 {
        let plane = t.data().to_vec();
        let mut data = plane.clone();
        data.extend_from_slice(&plane);
        data.extend_from_slice(&plane);
        t = Tensor::new([3, raw.height, raw.width], data)?;
    }
    Ok(resize_bilinear(&t, size, size)?)
}

/// Loads a mask, thresholds it above 127 and resamples by nearest neighbour.
pub fn load_mask(path: &Path, size: usize) -> Result<PixelMask> {
    let raw = read_pnm(path)?;
    if raw.channels != 1 {
        return Err(Error::Format(format!("{}: masks must be P5", path.display())));
    }
    let binary = Tensor::new(
        [raw.height, raw.width],
        raw.pixels.iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect(),
    )?;
    let resized = resize_nearest(&binary, size, size)?;
    Ok(PixelMask::new(size, size, resized.data().iter().map(|&v| v > 0.5).collect())?)
}

/// Mask of a record: loaded for anomalies, empty for normal images.
pub fn record_mask(record: &Record, size: usize) -> Result<PixelMask> {
    match &record.mask_path {
        Some(p) => load_mask(p, size),
        None => Ok(PixelMask::empty(size, size)),
    }
}
