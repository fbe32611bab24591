//! Anomaly maps, training losses and image scores.
//!
//! A stage map is the per-position cosine distance between encoder and
//! decoder features. Stage maps are summed, upsampled to image resolution,
//! and the image score is the largest mean over a square window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::meta_ad::Reconstruction;
use crate::tensor::{resize_bilinear, Real, Tensor, TensorError};
use crate::vit::ViTConfig;

/// Guard in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;

/// Stages whose reconstructions are trained and scored by default.
pub const DEFAULT_STAGES: [usize; 3] = [1, 2, 3];

/// Per-stage reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cosine distance between whole stages flattened to one vector each.
    #[default]
    CosineFlat,
    /// Mean over positions of the per-position cosine distance.
    CosinePixel,
    L1,
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CosineFlat => "cosine_flat",
            LossKind::CosinePixel => "cosine_pixel",
            LossKind::L1 => "l1",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine_flat" => Ok(LossKind::CosineFlat),
            "cosine_pixel" => Ok(LossKind::CosinePixel),
            "l1" => Ok(LossKind::L1),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::config(format!(
                "unknown loss {other:?}; expected cosine_flat, cosine_pixel, l1 or mse"
            ))),
        }
    }
}

/// Cosine distance per position of two `[C, h, w]` feature maps.
pub fn stage_anomaly_map<T: Real>(f: &Tensor<T>, f_hat: &Tensor<T>) -> Result<Tensor<T>> {
    if f.shape() != f_hat.shape() || f.ndim() != 3 {
        return Err(TensorError::Shape {
            op: "stage_anomaly_map",
            lhs: f.shape().to_vec(),
            rhs: f_hat.shape().to_vec(),
        }
        .into());
    }
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let hw = h * w;
    let (a, b) = (f.data(), f_hat.data());
    let out = (0..hw)
        .map(|p| {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for ch in 0..c {
                let (x, y) = (a[ch * hw + p].as_f64(), b[ch * hw + p].as_f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            T::lit(cosine_distance(dot, na, nb))
        })
        .collect();
    Ok(Tensor::new([h, w], out)?)
}

/// [`stage_anomaly_map`] for token-major `[h·w, C]` features.
pub fn token_anomaly_map<T: Real>(f: &Tensor<T>, f_hat: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    if f.shape() != f_hat.shape() || f.ndim() != 2 || f.rows() != grid.0 * grid.1 {
        return Err(TensorError::Shape {
            op: "token_anomaly_map",
            lhs: f.shape().to_vec(),
            rhs: f_hat.shape().to_vec(),
        }
        .into());
    }
    let c = f.cols();
    let out = f
        .data()
        .chunks_exact(c)
        .zip(f_hat.data().chunks_exact(c))
        .map(|(x, y)| {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in x.iter().zip(y) {
                let (x, y) = (x.as_f64(), y.as_f64());
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            T::lit(cosine_distance(dot, na, nb))
        })
        .collect();
    Ok(Tensor::new([grid.0, grid.1], out)?)
}

fn cosine_distance(dot: f64, na: f64, nb: f64) -> f64 {
    // Rounding can push 1 − cos a hair outside [0, 2].
    (1.0 - dot / (na.sqrt() * nb.sqrt() + COSINE_EPS)).clamp(0.0, 2.0)
}

/// Decoder indices pairing each constrained stage with its reconstruction.
pub fn constrained_pairs(targets: &[usize], constrained: &[usize]) -> Result<Vec<(usize, usize)>> {
    if constrained.is_empty() {
        return Err(Error::config("the constrained stage set is empty"));
    }
    constrained
        .iter()
        .map(|&stage| {
            targets
                .iter()
                .position(|&t| t == stage)
                .map(|j| (stage, j))
                .ok_or_else(|| {
                    Error::config(format!(
                        "stage {stage} has no decoder reconstruction; reconstructed stages are {targets:?}"
                    ))
                })
        })
        .collect()
}

/// Loss of one stage pair on the tape, both `[n, C]`.
pub fn stage_loss<T: Real>(tape: &mut Tape<T>, f: Var, f_hat: Var, kind: LossKind) -> Result<Var> {
    let eps = T::lit(COSINE_EPS);
    Ok(match kind {
        LossKind::CosineFlat => {
            let n = tape.value(f).numel();
            let a = tape.reshape(f, [1, n])?;
            let b = tape.reshape(f_hat, [1, n])?;
            let d = tape.cosine_distance_rows(a, b, eps)?;
            tape.sum(d)?
        }
        LossKind::CosinePixel => {
            let d = tape.cosine_distance_rows(f, f_hat, eps)?;
            tape.mean(d)?
        }
        LossKind::L1 => {
            let d = tape.sub(f, f_hat)?;
            let d = tape.abs(d)?;
            tape.mean(d)?
        }
        LossKind::Mse => {
            let d = tape.sub(f, f_hat)?;
            let d = tape.mul(d, d)?;
            tape.mean(d)?
        }
    })
}

/// Sum of stage losses over `(encoder feature, reconstruction)` pairs.
pub fn training_loss<T: Real>(tape: &mut Tape<T>, pairs: &[(Var, Var)], kind: LossKind) -> Result<Var> {
    let (first, rest) = pairs
        .split_first()
        .ok_or_else(|| Error::config("the constrained stage set is empty"))?;
    let mut total = stage_loss(tape, first.0, first.1, kind)?;
    for &(f, f_hat) in rest {
        let l = stage_loss(tape, f, f_hat, kind)?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Training loss of a finished reconstruction, without gradients.
pub fn reconstruction_loss(rec: &Reconstruction, constrained: &[usize], kind: LossKind) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let mut pairs = Vec::new();
    for (stage, j) in constrained_pairs(&rec.targets, constrained)? {
        let f = rec
            .encoded
            .stage(stage)
            .ok_or_else(|| Error::config(format!("encoder has no stage {stage}")))?;
        pairs.push((tape.constant(f.clone()), tape.constant(rec.decoder.stages[j].clone())));
    }
    let loss = training_loss(&mut tape, &pairs, kind)?;
    Ok(f64::from(tape.value(loss).item()))
}

/// Sums equally sized stage maps and upsamples the sum to `out_h × out_w`.
pub fn final_anomaly_map<T: Real>(stage_maps: &[Tensor<T>], out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let first = stage_maps
        .first()
        .ok_or_else(|| Error::config("no stage maps to combine"))?;
    let mut sum = first.clone();
    for m in &stage_maps[1..] {
        if m.shape() != first.shape() {
            return Err(TensorError::Shape {
                op: "final_anomaly_map",
                lhs: first.shape().to_vec(),
                rhs: m.shape().to_vec(),
            }
            .into());
        }
        for (s, &v) in sum.data_mut().iter_mut().zip(m.data()) {
            *s = *s + v;
        }
    }
    Ok(resize_bilinear(&sum, out_h, out_w)?)
}

/// Largest mean over all `window × window` placements fully inside the map.
pub fn image_score<T: Real>(map: &Tensor<T>, window: usize) -> Result<f64> {
    let &[h, w] = map.shape() else {
        return Err(Error::config(format!("image_score expects an [H, W] map, got {:?}", map.shape())));
    };
    if window == 0 || window > h.min(w) {
        return Err(Error::config(format!("pool window {window} does not fit a {h}x{w} map")));
    }
    // Separable box sums, each added in a fixed order. A summed-area table
    // is cheaper but its cancellations can break monotonicity in the last bit.
    let (oh, ow) = (h - window + 1, w - window + 1);
    let data = map.data();
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = data[y * w + x..y * w + x + window].iter().map(|v| v.as_f64()).sum();
        }
    }
    let area = (window * window) as f64;
    let mut best = f64::NEG_INFINITY;
    for y in 0..oh {
        for x in 0..ow {
            let s: f64 = (y..y + window).map(|yy| rows[yy * ow + x]).sum();
            best = best.max(s / area);
        }
    }
    Ok(best)
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_smooth<T: Real>(map: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let &[h, w] = map.shape() else {
        return Err(Error::config("gaussian_smooth expects an [H, W] map"));
    };
    if !(sigma > 0.0) {
        return Err(Error::config(format!("smoothing sigma must be positive, got {sigma}")));
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], len: usize, stride: usize, lines: usize, step: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..lines {
            for i in 0..len {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let j = (i as isize + k as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += kv * src[line * step + j * stride];
                }
                out[line * step + i * stride] = acc / norm;
            }
        }
        out
    };
    let data: Vec<f64> = map.data().iter().map(|v| v.as_f64()).collect();
    let rows = pass(&data, w, 1, h, w);
    let cols = pass(&rows, h, w, w, 1);
    Ok(Tensor::new([h, w], cols.into_iter().map(T::lit).collect())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Encoder stages whose maps are summed.
    pub stages: Vec<usize>,
    /// Pooling window in output pixels; `None` uses one patch footprint.
    pub pool_window: Option<usize>,
    /// Optional Gaussian smoothing of the final map.
    pub smoothing_sigma: Option<f64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGES.to_vec(),
            pool_window: None,
            smoothing_sigma: None,
        }
    }
}

impl ScoringConfig {
    pub fn window(&self, vit: &ViTConfig) -> usize {
        self.pool_window.unwrap_or(vit.patch_size)
    }
}

/// Scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// Summed map at image resolution.
    pub pixel_map: Tensor,
    pub image_score: f64,
    /// One `[h, w]` map per scored stage.
    pub stage_maps: Vec<Tensor>,
}

impl AnomalyMap {
    pub fn from_reconstruction(rec: &Reconstruction, vit: &ViTConfig, cfg: &ScoringConfig) -> Result<Self> {
        let grid = rec.decoder.grid;
        let mut stage_maps = Vec::with_capacity(cfg.stages.len());
        for (stage, j) in constrained_pairs(&rec.targets, &cfg.stages)? {
            let f = rec
                .encoded
                .stage(stage)
                .ok_or_else(|| Error::config(format!("encoder has no stage {stage}")))?;
            stage_maps.push(token_anomaly_map(f, &rec.decoder.stages[j], grid)?);
        }
        let mut pixel_map = final_anomaly_map(&stage_maps, vit.image_size, vit.image_size)?;
        if let Some(sigma) = cfg.smoothing_sigma {
            pixel_map = gaussian_smooth(&pixel_map, sigma)?;
        }
        if !pixel_map.all_finite() {
            return Err(Error::Numerical("anomaly map holds non-finite values".into()));
        }
        let image_score = image_score(&pixel_map, cfg.window(vit))?;
        Ok(Self {
            pixel_map,
            image_score,
            stage_maps,
        })
    }
}

#[cfg(test)]
mod tests;
