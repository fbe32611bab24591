use serde::{Deserialize, Serialize};

use super::{aupro, auroc, average_precision, f1_max, AuproSweep, LabeledScores, MetricError, PixelMask};
use crate::tensor::Tensor;

/// Column order used by every report.
pub const METRIC_NAMES: [&str; 7] = [
    "image_auroc",
    "image_ap",
    "image_f1max",
    "pixel_auroc",
    "pixel_ap",
    "pixel_f1max",
    "pixel_aupro",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub fpr_cap: f64,
    pub aupro_sweep: AuproSweep,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            fpr_cap: 0.3,
            aupro_sweep: AuproSweep::Exact,
        }
    }
}

/// Seven metrics on `[0, 1]`; a metric with no defined value is `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub image_auroc: Option<f64>,
    pub image_ap: Option<f64>,
    pub image_f1max: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_ap: Option<f64>,
    pub pixel_f1max: Option<f64>,
    pub pixel_aupro: Option<f64>,
    /// Mean of the metrics that are present.
    pub mad: Option<f64>,
    /// True when AU-PRO used a quantized threshold sweep.
    #[serde(default)]
    pub aupro_quantized: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl MetricReport {
    /// Evaluates image scores against image labels and pixel maps against
    /// masks. Undefined metrics are left out with a warning.
    pub fn compute(
        image: &LabeledScores,
        maps: &[Tensor],
        masks: &[PixelMask],
        cfg: &MetricConfig,
    ) -> Result<Self, MetricError> {
        if maps.len() != masks.len() {
            return Err(MetricError::Contract(format!("{} maps but {} masks", maps.len(), masks.len())));
        }
        let mut pixel_scores = Vec::new();
        let mut pixel_labels = Vec::new();
        for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
            if map.shape() != [mask.height, mask.width] {
                return Err(MetricError::Contract(format!("map {i} does not match its mask")));
            }
            pixel_scores.extend(map.data().iter().map(|&v| f64::from(v)));
            pixel_labels.extend_from_slice(&mask.data);
        }
        let pixel = LabeledScores::new(pixel_scores, pixel_labels)?;

        let mut warnings = Vec::new();
        let mut keep = |r: Result<f64, MetricError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(e @ MetricError::Undefined { .. }) => {
                warnings.push(e.to_string());
                Ok(None)
            }
            Err(e) => Err(e),
        };
        let mut report = MetricReport {
            image_auroc: keep(auroc(image))?,
            image_ap: keep(average_precision(image))?,
            image_f1max: keep(f1_max(image))?,
            pixel_auroc: keep(auroc(&pixel))?,
            pixel_ap: keep(average_precision(&pixel))?,
            pixel_f1max: keep(f1_max(&pixel))?,
            pixel_aupro: keep(aupro(maps, masks, cfg.fpr_cap, cfg.aupro_sweep))?,
            mad: None,
            aupro_quantized: matches!(cfg.aupro_sweep, AuproSweep::Quantized(_)),
            warnings: Vec::new(),
        };
        report.warnings = warnings;
        report.mad = report.present_mean();
        Ok(report)
    }

    pub fn values(&self) -> [Option<f64>; 7] {
        [
            self.image_auroc,
            self.image_ap,
            self.image_f1max,
            self.pixel_auroc,
            self.pixel_ap,
            self.pixel_f1max,
            self.pixel_aupro,
        ]
    }

    fn from_values(v: [Option<f64>; 7]) -> Self {
        let mut r = MetricReport {
            image_auroc: v[0],
            image_ap: v[1],
            image_f1max: v[2],
            pixel_auroc: v[3],
            pixel_ap: v[4],
            pixel_f1max: v[5],
            pixel_aupro: v[6],
            ..Default::default()
        };
        r.mad = r.present_mean();
        r
    }

    fn present_mean(&self) -> Option<f64> {
        let present: Vec<f64> = self.values().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    /// Field-wise mean over classes, skipping classes where a metric is
    /// absent.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let mut out = [None; 7];
        for (k, slot) in out.iter_mut().enumerate() {
            let present: Vec<f64> = reports.iter().filter_map(|r| r.values()[k]).collect();
            if !present.is_empty() {
                *slot = Some(present.iter().sum::<f64>() / present.len() as f64);
            }
        }
        let mut r = Self::from_values(out);
        r.aupro_quantized = reports.iter().any(|r| r.aupro_quantized);
        r.warnings = reports.iter().flat_map(|r| r.warnings.iter().cloned()).collect();
        r
    }

    /// Pixel-level AU-ROC, the model-selection criterion.
    pub fn selection_score(&self) -> f64 {
        self.pixel_auroc.unwrap_or(f64::NEG_INFINITY)
    }
}

/// Strict mean of all seven metrics.
pub fn aggregate_mad(fields: &[Option<f64>]) -> Result<f64, MetricError> {
    if fields.len() != METRIC_NAMES.len() {
        return Err(MetricError::Contract(format!("expected 7 metrics, got {}", fields.len())));
    }
    let mut sum = 0.0;
    for (name, f) in METRIC_NAMES.iter().zip(fields) {
        sum += f.ok_or_else(|| MetricError::Contract(format!("{name} is missing")))?;
    }
    Ok(sum / 7.0)
}
