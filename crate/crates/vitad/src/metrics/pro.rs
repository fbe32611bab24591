use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::tensor::Tensor;

/// Binary ground-truth mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self, MetricError> {
        if data.len() != height * width {
            return Err(MetricError::Contract(format!(
                "mask of {height}x{width} given {} pixels",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    /// 8-bit intensities, anomalous above 127.
    pub fn from_gray(height: usize, width: usize, gray: &[u8]) -> Result<Self, MetricError> {
        Self::new(height, width, gray.iter().map(|&g| g > 127).collect())
    }

    pub fn anomalous(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            [self.height, self.width],
            self.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask extents are nonzero")
    }

    /// Labels 8-connected anomalous components; 0 is background, regions
    /// count from 1. Returns the label image and the region count.
    pub fn regions(&self) -> (Vec<u32>, usize) {
        let (h, w) = (self.height, self.width);
        let mut label = vec![0u32; h * w];
        let mut count = 0u32;
        let mut queue = VecDeque::new();
        for start in 0..h * w {
            if !self.data[start] || label[start] != 0 {
                continue;
            }
            count += 1;
            label[start] = count;
            queue.push_back(start);
            while let Some(p) = queue.pop_front() {
                let (y, x) = (p / w, p % w);
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let q = ny * w + nx;
                        if self.data[q] && label[q] == 0 {
                            label[q] = count;
                            queue.push_back(q);
                        }
                    }
                }
            }
        }
        (label, count as usize)
    }
}

/// How the AU-PRO threshold sweep is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuproSweep {
    /// Every distinct score is a threshold.
    #[default]
    Exact,
    /// Evenly spaced thresholds between the smallest and largest score.
    Quantized(usize),
}

/// Area under the per-region-overlap curve up to `fpr_cap`, divided by
/// `fpr_cap`.
pub fn aupro(maps: &[Tensor], masks: &[PixelMask], fpr_cap: f64, sweep: AuproSweep) -> Result<f64, MetricError> {
    if maps.len() != masks.len() {
        return Err(MetricError::Contract(format!("{} maps but {} masks", maps.len(), masks.len())));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(MetricError::Contract(format!("fpr_cap {fpr_cap} outside (0, 1]")));
    }
    if let AuproSweep::Quantized(0) = sweep {
        return Err(MetricError::Contract("quantized sweep needs at least one bin".into()));
    }

    const NORMAL: u32 = u32::MAX;
    let mut pixels: Vec<(f64, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        if map.shape() != [mask.height, mask.width] {
            return Err(MetricError::Contract(format!(
                "map {i} has shape {:?}, mask is {}x{}",
                map.shape(),
                mask.height,
                mask.width
            )));
        }
        let (labels, count) = mask.regions();
        let base = region_sizes.len() as u32;
        region_sizes.extend(std::iter::repeat_n(0, count));
        for (&score, &l) in map.data().iter().zip(&labels) {
            let score = f64::from(score);
            if !score.is_finite() {
                return Err(MetricError::Contract(format!("map {i} holds a non-finite score")));
            }
            if l == 0 {
                pixels.push((score, NORMAL));
            } else {
                let id = base + l - 1;
                region_sizes[id as usize] += 1;
                pixels.push((score, id));
            }
        }
    }
    let regions = region_sizes.len();
    if regions == 0 {
        return Err(MetricError::undefined("aupro", "no anomalous pixels"));
    }
    let normals = pixels.iter().filter(|p| p.1 == NORMAL).count();
    if normals == 0 {
        return Err(MetricError::undefined("aupro", "no normal pixels"));
    }

    if let AuproSweep::Quantized(bins) = sweep {
        let lo = pixels.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = pixels.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let step = (hi - lo) / bins as f64;
        for p in &mut pixels {
            // Snap down to the largest grid threshold not above the score.
            let k = if step > 0.0 {
                (((p.0 - lo) / step).floor() as usize).min(bins)
            } else {
                0
            };
            p.0 = k as f64;
        }
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let inv_size: Vec<f64> = region_sizes.iter().map(|&s| 1.0 / s as f64).collect();
    let (mut fp, mut overlap) = (0usize, 0.0f64);
    let (mut prev_fpr, mut prev_pro) = (0.0f64, 0.0f64);
    let mut area = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let key = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == key {
            match pixels[i].1 {
                NORMAL => fp += 1,
                r => overlap += inv_size[r as usize],
            }
            i += 1;
        }
        let fpr = fp as f64 / normals as f64;
        let pro = overlap / regions as f64;
        if fpr >= fpr_cap {
            let t = if fpr > prev_fpr {
                (fpr_cap - prev_fpr) / (fpr - prev_fpr)
            } else {
                1.0
            };
            let pro_cap = prev_pro + t * (pro - prev_pro);
            area += (fpr_cap - prev_fpr) * (prev_pro + pro_cap) / 2.0;
            return Ok(area / fpr_cap);
        }
        area += (fpr - prev_fpr) * (prev_pro + pro) / 2.0;
        prev_fpr = fpr;
        prev_pro = pro;
    }
    unreachable!("the last threshold has fpr 1")
}
