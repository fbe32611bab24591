//! Input conditioning and optional training augmentations.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

/// Per-channel statistics for `(x − mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for NormStats {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

pub fn normalize(image: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::config(format!("normalize expects [3, H, W], got {:?}", image.shape())));
    };
    if let Some(s) = stats.std.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::config(format!("normalization std must be positive, got {s}")));
    }
    let mut out = image.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        for v in plane {
            *v = (*v - m) / s;
        }
    }
    Ok(out)
}

/// Training-time augmentations. All are off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop the central 224/256 of the image and scale it back up.
    pub center_crop: bool,
    /// Brightness, contrast and saturation factors drawn from `1 ± strength`.
    pub color_jitter: f32,
    pub hflip: bool,
    /// Maximum rotation in degrees, drawn uniformly from `±rotation`.
    pub rotation: f32,
    pub random_resized_crop: bool,
}

impl AugmentConfig {
    pub fn is_active(&self) -> bool {
        self.center_crop || self.color_jitter > 0.0 || self.hflip || self.rotation > 0.0 || self.random_resized_crop
    }

    /// Every augmentation at its usual strength.
    pub fn all() -> Self {
        Self {
            center_crop: true,
            color_jitter: 0.4,
            hflip: true,
            rotation: 15.0,
            random_resized_crop: true,
        }
    }
}

/// Applies the enabled augmentations to a `[3, H, W]` image on `[0, 1]`.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::config(format!("augment expects [3, H, W], got {:?}", image.shape())));
    };
    let mut img = image.clone();
    if cfg.random_resized_crop {
        img = random_resized_crop(&img, rng)?;
    }
    if cfg.center_crop {
        let (ch, cw) = ((h * 224).div_ceil(256), (w * 224).div_ceil(256));
        img = crop(&img, (h - ch) / 2, (w - cw) / 2, ch, cw);
        img = resize_bilinear(&img, h, w)?;
    }
    if cfg.hflip && rng.random_bool(0.5) {
        for row in img.data_mut().chunks_exact_mut(w) {
            row.reverse();
        }
    }
    if cfg.rotation > 0.0 {
        let deg = rng.random_range(-cfg.rotation..=cfg.rotation);
        img = rotate(&img, deg.to_radians());
    }
    if cfg.color_jitter > 0.0 {
        let s = cfg.color_jitter;
        let mut factor = || rng.random_range((1.0 - s).max(0.0)..=1.0 + s);
        let (b, c, sat) = (factor(), factor(), factor());
        jitter(&mut img, b, c, sat);
    }
    Ok(img)
}

fn crop(img: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(3 * ch * cw);
    for plane in img.data().chunks_exact(h * w) {
        for y in y0..y0 + ch {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
    }
    Tensor::new([3, ch, cw], out).expect("crop extents are nonzero")
}

fn random_resized_crop(img: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(0.08..=1.0);
        let log_ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
        let ratio = log_ratio.exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            return Ok(resize_bilinear(&crop(img, y0, x0, ch, cw), h, w)?);
        }
    }
    Ok(img.clone())
}

/// Rotation about the centre with bilinear sampling; outside pixels are 0.
fn rotate(img: &Tensor, angle: f32) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0f32; img.numel()];
    for (plane, dst) in img.data().chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let sx = cos * dx + sin * dy + cx;
                let sy = -sin * dx + cos * dy + cy;
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                    continue;
                }
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
                let at = |yy: usize, xx: usize| plane[yy * w + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same extents")
}

fn jitter(img: &mut Tensor, brightness: f32, contrast: f32, saturation: f32) {
    let hw = img.shape()[1] * img.shape()[2];
    let data = img.data_mut();
    for v in data.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let gray = |d: &[f32], p: usize| 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p];
    let mean = (0..hw).map(|p| gray(data, p)).sum::<f32>() / hw as f32;
    for v in data.iter_mut() {
        *v = (mean + (*v - mean) * contrast).clamp(0.0, 1.0);
    }
    for p in 0..hw {
        let g = gray(data, p);
        for ch in 0..3 {
            let v = &mut data[ch * hw + p];
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
}
