//! Deterministic multi-class texture dataset with injected local defects.
//!
//! Each class is an oriented sinusoid in its own frequency band, roughened by
//! value noise and coloured with a class palette. Defects only touch pixels
//! inside their mask, so the mask is exact.

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pnm::{encode_pnm, RawImage};
use crate::error::{Error, Result};
use crate::init::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    /// A square copied from elsewhere in the image and turned a quarter.
    PatchSwap,
    /// An ellipse repainted in an off-palette colour.
    IntensityBlob,
    /// A thick straight stroke.
    ScratchLine,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::PatchSwap, DefectKind::IntensityBlob, DefectKind::ScratchLine];

    pub fn name(self) -> &'static str {
        match self {
            DefectKind::PatchSwap => "patch_swap",
            DefectKind::IntensityBlob => "intensity_blob",
            DefectKind::ScratchLine => "scratch_line",
        }
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DefectKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown defect type {s:?}")))
    }
}

/// Procedural parameters of one class texture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Sinusoid cycles across the image width.
    pub frequency: f32,
    /// Stripe orientation in radians.
    pub orientation: f32,
    pub noise_octaves: u32,
    pub noise_amplitude: f32,
    pub dark: [f32; 3],
    pub light: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_normal_per_class: usize,
    pub test_anomaly_per_class: usize,
    pub image_size: usize,
    pub defect_types: Vec<DefectKind>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 20,
            test_normal_per_class: 5,
            test_anomaly_per_class: 5,
            image_size: 64,
            defect_types: DefectKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

const CLASS_NAMES: [&str; 8] = ["weave", "ripple", "grain", "mesh", "slate", "fiber", "dune", "tile"];

/// Defect area bounds as fractions of the image.
const MIN_AREA: f32 = 0.005;
const MAX_AREA: f32 = 0.10;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("train_per_class", self.train_per_class),
            ("test_normal_per_class", self.test_normal_per_class),
            ("test_anomaly_per_class", self.test_anomaly_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, n)| *n == 0) {
            return Err(Error::config(format!("synth.{name} must be at least 1")));
        }
        if self.image_size < 16 {
            return Err(Error::config("synth.image_size must be at least 16"));
        }
        if self.defect_types.is_empty() {
            return Err(Error::config("synth.defect_types is empty"));
        }
        Ok(())
    }

    pub fn class_name(&self, class: usize) -> String {
        match CLASS_NAMES.get(class) {
            Some(n) if self.num_classes <= CLASS_NAMES.len() => n.to_string(),
            _ => format!("texture{class:02}"),
        }
    }

    /// Frequencies are spaced so that neighbouring classes never share a band.
    pub fn texture(&self, class: usize) -> TextureParams {
        let k = class as f32;
        let hue = k / self.num_classes as f32;
        let light = hue_to_rgb(hue, 0.85);
        let dark = hue_to_rgb((hue + 0.5) % 1.0, 0.25);
        TextureParams {
            frequency: 3.0 + 2.5 * k,
            orientation: k * PI / self.num_classes as f32,
            noise_octaves: 2 + (class % 2) as u32,
            noise_amplitude: 0.15,
            dark,
            light,
        }
    }
}

fn hue_to_rgb(h: f32, value: f32) -> [f32; 3] {
    let c = |offset: f32| {
        let x = ((h + offset) % 1.0) * 6.0;
        let v = (x - 3.0).abs() - 1.0;
        value * (0.35 + 0.65 * v.clamp(0.0, 1.0))
    };
    [c(0.0), c(2.0 / 3.0), c(1.0 / 3.0)]
}

/// Smooth random field on `[0, 1]` built from lattice octaves.
fn value_noise(size: usize, octaves: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut field = vec![0.0f32; size * size];
    let mut weight_total = 0.0;
    for o in 0..octaves {
        let cells = 2usize << o;
        let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.random()).collect();
        let weight = 0.5f32.powi(o as i32);
        weight_total += weight;
        for y in 0..size {
            for x in 0..size {
                let fy = y as f32 / size as f32 * cells as f32;
                let fx = x as f32 / size as f32 * cells as f32;
                let (iy, ix) = (fy as usize, fx as usize);
                let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
                let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
                let at = |yy: usize, xx: usize| lattice[yy * (cells + 1) + xx];
                let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                field[y * size + x] += weight * (top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    field.iter_mut().for_each(|v| *v /= weight_total);
    field
}

fn render_texture(cfg: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let t = cfg.texture(class);
    let s = cfg.image_size;
    let phase = rng.random_range(0.0..2.0 * PI);
    let theta = t.orientation + rng.random_range(-0.08..0.08);
    let (sin, cos) = theta.sin_cos();
    let noise = value_noise(s, t.noise_octaves, rng);
    let mut data = vec![0.0f32; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let u = (x as f32 * cos + y as f32 * sin) / s as f32;
            let wave = (2.0 * PI * t.frequency * u + phase).sin();
            let v = (0.5 + 0.32 * wave + t.noise_amplitude * (noise[y * s + x] - 0.5) * 2.0).clamp(0.0, 1.0);
            for ch in 0..3 {
                data[ch * s * s + y * s + x] = t.dark[ch] + (t.light[ch] - t.dark[ch]) * v;
            }
        }
    }
    Tensor::new([3, s, s], data).expect("nonzero size")
}

/// A normal image and, for anomalies, the defect drawn over it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// The image before any defect was injected.
    pub template: RawImage,
    pub image: RawImage,
    pub mask: Option<RawImage>,
    pub defect: Option<DefectKind>,
}

/// Generator stream for one image; splits never share a stream.
fn image_stream(cfg: &SynthConfig, class: usize, split: u64, index: usize) -> ChaCha8Rng {
    stream(cfg.seed, ((class as u64) << 40) | (split << 32) | index as u64)
}

const SPLIT_TRAIN: u64 = 0;
const SPLIT_TEST_GOOD: u64 = 1;
const SPLIT_TEST_BAD: u64 = 2;

pub fn render_normal(cfg: &SynthConfig, class: usize, train: bool, index: usize) -> RawImage {
    let split = if train { SPLIT_TRAIN } else { SPLIT_TEST_GOOD };
    let mut rng = image_stream(cfg, class, split, index);
    RawImage::from_tensor(&render_texture(cfg, class, &mut rng)).expect("3-channel render")
}

pub fn render_anomaly(cfg: &SynthConfig, class: usize, index: usize) -> SynthSample {
    let kind = cfg.defect_types[index % cfg.defect_types.len()];
    let mut rng = image_stream(cfg, class, SPLIT_TEST_BAD, index);
    let clean = render_texture(cfg, class, &mut rng);
    let s = cfg.image_size;
    let (mask, image) = loop {
        let mask = match kind {
            DefectKind::PatchSwap => square_mask(s, &mut rng),
            DefectKind::IntensityBlob => ellipse_mask(s, &mut rng),
            DefectKind::ScratchLine => stroke_mask(s, &mut rng),
        };
        let area = mask.iter().filter(|&&m| m).count() as f32 / (s * s) as f32;
        if !(MIN_AREA..=MAX_AREA).contains(&area) {
            continue;
        }
        let image = match kind {
            DefectKind::PatchSwap => swap_patch(&clean, &mask, &mut rng),
            DefectKind::IntensityBlob => repaint(&clean, &mask, blob_colour(cfg, class, &mut rng), 0.25),
            DefectKind::ScratchLine => {
                let tone = if rng.random_bool(0.5) { 0.02 } else { 0.98 };
                repaint(&clean, &mask, [tone; 3], 0.0)
            }
        };
        break (mask, image);
    };
    SynthSample {
        template: RawImage::from_tensor(&clean).expect("3-channel render"),
        image: RawImage::from_tensor(&image).expect("3-channel render"),
        mask: Some(RawImage {
            channels: 1,
            height: s,
            width: s,
            pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        }),
        defect: Some(kind),
    }
}

fn square_mask(s: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let side = rng.random_range(s / 8..=s * 2 / 7).max(2);
    let y0 = rng.random_range(0..=s - side);
    let x0 = rng.random_range(0..=s - side);
    let mut m = vec![false; s * s];
    for y in y0..y0 + side {
        m[y * s + x0..y * s + x0 + side].iter_mut().for_each(|v| *v = true);
    }
    m
}

fn ellipse_mask(s: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let sf = s as f32;
    let (ry, rx) = (rng.random_range(0.05..0.16) * sf, rng.random_range(0.05..0.16) * sf);
    let cy = rng.random_range(ry..sf - ry);
    let cx = rng.random_range(rx..sf - rx);
    (0..s * s)
        .map(|p| {
            let (dy, dx) = (((p / s) as f32 + 0.5 - cy) / ry, ((p % s) as f32 + 0.5 - cx) / rx);
            dy * dy + dx * dx <= 1.0
        })
        .collect()
}

fn stroke_mask(s: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let sf = s as f32;
    let len = rng.random_range(0.3..0.6) * sf;
    let half_width = (sf / 40.0).max(1.0) * rng.random_range(1.0..1.6);
    let angle = rng.random_range(0.0..PI);
    let (dy, dx) = (angle.sin(), angle.cos());
    let margin = len / 2.0 + half_width;
    let cy = rng.random_range(margin.min(sf / 2.0)..(sf - margin).max(sf / 2.0 + 1e-3));
    let cx = rng.random_range(margin.min(sf / 2.0)..(sf - margin).max(sf / 2.0 + 1e-3));
    (0..s * s)
        .map(|p| {
            let (py, px) = ((p / s) as f32 + 0.5 - cy, (p % s) as f32 + 0.5 - cx);
            let along = py * dy + px * dx;
            let across = -py * dx + px * dy;
            along.abs() <= len / 2.0 && across.abs() <= half_width
        })
        .collect()
}

/// Paints `colour` inside the mask, keeping `keep` of the original.
fn repaint(img: &Tensor, mask: &[bool], colour: [f32; 3], keep: f32) -> Tensor {
    let hw = mask.len();
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
        for (v, &m) in plane.iter_mut().zip(mask) {
            if m {
                *v = keep * *v + (1.0 - keep) * colour[ch];
            }
        }
    }
    out
}

fn blob_colour(cfg: &SynthConfig, class: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let t = cfg.texture(class);
    let hue = class as f32 / cfg.num_classes as f32 + 0.25 + rng.random_range(0.0..0.5);
    let c = hue_to_rgb(hue % 1.0, 0.9);
    // Push away from the mean class colour so the blob never blends in.
    let mid: Vec<f32> = (0..3).map(|i| (t.dark[i] + t.light[i]) / 2.0).collect();
    std::array::from_fn(|i| if (c[i] - mid[i]).abs() < 0.3 { 1.0 - mid[i] } else { c[i] })
}

/// Fills the masked square with a quarter-turned copy of another square.
fn swap_patch(img: &Tensor, mask: &[bool], rng: &mut ChaCha8Rng) -> Tensor {
    let s = img.shape()[1];
    let first = mask.iter().position(|&m| m).expect("nonempty mask");
    let (y0, x0) = (first / s, first % s);
    let side = mask[first..].iter().take_while(|&&m| m).count();
    // Source square placed away from the destination where possible.
    let (sy, sx) = loop {
        let sy = rng.random_range(0..=s - side);
        let sx = rng.random_range(0..=s - side);
        if sy.abs_diff(y0) >= side || sx.abs_diff(x0) >= side || s < 2 * side {
            break (sy, sx);
        }
    };
    let mut out = img.clone();
    let src = img.data();
    let dst = out.data_mut();
    for ch in 0..3 {
        let base = ch * s * s;
        for dy in 0..side {
            for dx in 0..side {
                dst[base + (y0 + dy) * s + x0 + dx] = src[base + (sy + side - 1 - dx) * s + sx + dy];
            }
        }
    }
    out
}

/// Record counts written by [`generate_synthetic`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub train: usize,
    pub test_normal: usize,
    pub test_anomaly: usize,
    pub masks: usize,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train={} test={} (normal={} anomaly={}) masks={}",
            self.train,
            self.test_normal + self.test_anomaly,
            self.test_normal,
            self.test_anomaly,
            self.masks
        )
    }
}

fn write(path: &Path, img: &RawImage) -> Result<()> {
    fs::write(path, encode_pnm(img)?).map_err(|e| Error::io(path, e))
}

fn mkdirs(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the dataset under `root`, which must be empty or absent. The
/// parent of `root` must exist.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    match fs::read_dir(root) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(Error::config(format!("{} is not empty", root.display())));
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            fs::create_dir(root).map_err(|e| Error::io(root, e))?;
        }
        Err(e) => return Err(Error::io(root, e)),
    }

    let mut summary = SynthSummary::default();
    for class in 0..cfg.num_classes {
        let name = cfg.class_name(class);
        let train_dir = root.join(&name).join("train").join("good");
        let good_dir = root.join(&name).join("test").join("good");
        mkdirs(&train_dir)?;
        mkdirs(&good_dir)?;
        for i in 0..cfg.train_per_class {
            write(&train_dir.join(format!("{i:03}.ppm")), &render_normal(cfg, class, true, i))?;
            summary.train += 1;
        }
        for i in 0..cfg.test_normal_per_class {
            write(&good_dir.join(format!("{i:03}.ppm")), &render_normal(cfg, class, false, i))?;
            summary.test_normal += 1;
        }
        for i in 0..cfg.test_anomaly_per_class {
            let sample = render_anomaly(cfg, class, i);
            let kind = sample.defect.expect("anomaly sample").name();
            let img_dir = root.join(&name).join("test").join(kind);
            let mask_dir = root.join("ground_truth").join(&name).join(kind);
            mkdirs(&img_dir)?;
            mkdirs(&mask_dir)?;
            write(&img_dir.join(format!("{i:03}.ppm")), &sample.image)?;
            write(&mask_dir.join(format!("{i:03}_mask.pgm")), sample.mask.as_ref().expect("anomaly mask"))?;
            summary.test_anomaly += 1;
            summary.masks += 1;
        }
    }
    Ok(summary)
}
