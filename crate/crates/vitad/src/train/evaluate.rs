use serde::{Deserialize, Serialize};

use crate::data::{load_image, normalize, record_mask, DatasetIndex, NormStats, Record};
use crate::error::{Error, Result};
use crate::meta_ad::{EncodedImage, VitAd};
use crate::metrics::{LabeledScores, MetricConfig, MetricReport, PixelMask};
use crate::scoring::{image_score, AnomalyMap, ScoringConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scoring: ScoringConfig,
    pub metrics: MetricConfig,
    /// Threads scoring test images; results do not depend on it.
    pub workers: usize,
    /// Score ground-truth masks instead of model output.
    pub oracle_masks: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scoring: ScoringConfig::default(),
            metrics: MetricConfig::default(),
            workers: 1,
            oracle_masks: false,
        }
    }
}

/// Test images loaded, normalized and, once a model is known, encoded.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub records: Vec<Record>,
    pub images: Vec<Tensor>,
    pub masks: Vec<PixelMask>,
    pub classes: Vec<String>,
    encoded: Option<(String, Vec<EncodedImage>)>,
}

impl TestSet {
    pub fn load(index: &DatasetIndex, size: usize, norm: &NormStats) -> Result<Self> {
        let records: Vec<Record> = index.test().cloned().collect();
        if records.is_empty() {
            return Err(Error::config("the dataset has no test images"));
        }
        let mut images = Vec::with_capacity(records.len());
        let mut masks = Vec::with_capacity(records.len());
        for r in &records {
            images.push(normalize(&load_image(&r.image_path, size)?, norm)?);
            masks.push(record_mask(r, size)?);
        }
        let classes = index
            .classes
            .iter()
            .filter(|c| records.iter().any(|r| &r.class == *c))
            .cloned()
            .collect();
        Ok(Self {
            records,
            images,
            masks,
            classes,
            encoded: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Encodes every image with the model's frozen encoder. Cached features
    /// are reused while the encoder fingerprint is unchanged.
    pub fn encode(&mut self, model: &VitAd, workers: usize) -> Result<()> {
        let key = model.encoder_fingerprint();
        if self.encoded.as_ref().is_some_and(|(k, _)| *k == key) {
            return Ok(());
        }
        let encoded = par_map(&self.images, workers, |img| model.encode(img))?;
        self.encoded = Some((key, encoded));
        Ok(())
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub(crate) fn par_map<I: Sync, O: Send>(
    items: &[I],
    workers: usize,
    f: impl Fn(&I) -> Result<O> + Sync,
) -> Result<Vec<O>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Score of one test image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub class: String,
    pub image_path: std::path::PathBuf,
    pub anomalous: bool,
    pub image_score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub per_class: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
    pub images: Vec<ImageOutcome>,
    /// Maps in test-set order.
    pub maps: Vec<AnomalyMap>,
}

fn oracle_map(mask: &PixelMask, window: usize) -> Result<AnomalyMap> {
    let pixel_map = mask.to_tensor();
    let image_score = image_score(&pixel_map, window.min(mask.height.min(mask.width)))?;
    Ok(AnomalyMap {
        pixel_map,
        image_score,
        stage_maps: Vec::new(),
    })
}

/// Scores every test image, then computes per-class metrics and their mean.
/// Model parameters are only read.
pub fn evaluate(model: &VitAd, test: &mut TestSet, cfg: &EvalConfig) -> Result<Evaluation> {
    let vit = model.vit();
    let maps: Vec<AnomalyMap> = if cfg.oracle_masks {
        test.masks
            .iter()
            .map(|m| oracle_map(m, cfg.scoring.window(vit)))
            .collect::<Result<_>>()?
    } else {
        test.encode(model, cfg.workers)?;
        let (_, encoded) = test.encoded.as_ref().expect("encoded above");
        par_map(encoded, cfg.workers, |e| {
            let rec = model.reconstruct(e)?;
            AnomalyMap::from_reconstruction(&rec, vit, &cfg.scoring)
        })?
    };

    let mut per_class = Vec::new();
    for class in &test.classes {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| &test.records[i].class == class).collect();
        let scores = LabeledScores::new(
            idx.iter().map(|&i| maps[i].image_score).collect(),
            idx.iter().map(|&i| test.records[i].anomalous).collect(),
        )?;
        let class_maps: Vec<Tensor> = idx.iter().map(|&i| maps[i].pixel_map.clone()).collect();
        let class_masks: Vec<PixelMask> = idx.iter().map(|&i| test.masks[i].clone()).collect();
        let mut report = MetricReport::compute(&scores, &class_maps, &class_masks, &cfg.metrics)?;
        for w in &mut report.warnings {
            *w = format!("{class}: {w}");
        }
        per_class.push((class.clone(), report));
    }
    let reports: Vec<MetricReport> = per_class.iter().map(|(_, r)| r.clone()).collect();
    let mean = MetricReport::mean(&reports);
    let images = test
        .records
        .iter()
        .zip(&maps)
        .map(|(r, m)| ImageOutcome {
            class: r.class.clone(),
            image_path: r.image_path.clone(),
            anomalous: r.anomalous,
            image_score: m.image_score,
        })
        .collect();
    Ok(Evaluation {
        per_class,
        mean,
        images,
        maps,
    })
}
