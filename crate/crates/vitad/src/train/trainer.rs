use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, par_map, TestSet};
use super::{lr_at, AdamW};
use crate::autodiff::{Tape, Var};
use crate::config::RunConfig;
use crate::data::{augment, load_image, normalize, DatasetIndex, Record};
use crate::error::{Error, Result};
use crate::init::stream;
use crate::io::save_archive;
use crate::meta_ad::{fuse_and_decode, EncodedImage, VitAd};
use crate::metrics::MetricReport;
use crate::scoring::{constrained_pairs, training_loss};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{ParamTree, TensorTree};

// Stream ids below this are reserved for the model initializers.
const SHUFFLE_STREAM: u64 = 1 << 32;
const AUGMENT_STREAM: u64 = 2 << 32;

/// Metrics from one in-training evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Epochs completed when the evaluation ran.
    pub epoch: usize,
    pub mean: MetricReport,
    pub per_class: Vec<(String, MetricReport)>,
}

/// Emitted after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval: Option<EvalRecord>,
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch {}/{} lr={:e} loss={:.6}", self.epoch, self.epochs, self.lr, self.loss)?;
        if let Some(ev) = &self.eval {
            let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
            write!(
                f,
                " image_auroc={} pixel_auroc={} mad={}",
                pct(ev.mean.image_auroc),
                pct(ev.mean.pixel_auroc),
                pct(ev.mean.mad)
            )?;
        }
        Ok(())
    }
}

/// Everything needed to audit or repeat a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: RunConfig,
    pub dataset_fingerprint: String,
    pub encoder_fingerprint: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    pub steps: u64,
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    /// Epoch whose parameters are in the best checkpoint.
    pub best_epoch: usize,
    pub final_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: RunManifest,
    /// Parameters at the evaluation with the highest mean pixel AU-ROC, or
    /// the final ones when no evaluation ran.
    pub best: Vec<(String, Tensor)>,
}

/// Epoch counts after which evaluation runs: `round(k * epochs / points)`
/// for `k = 1..=points`, deduplicated.
pub fn eval_epochs(epochs: usize, points: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=points)
        .map(|k| ((k * epochs) as f64 / points as f64).round() as usize)
        .filter(|&e| e >= 1 && e <= epochs)
        .collect();
    out.dedup();
    out
}

type Snapshot = Vec<(String, Tensor)>;

enum Inputs {
    /// Encoder output per image, computed once.
    Cached(Vec<EncodedImage>),
    /// Images on `[0, 1]`, augmented and encoded every step.
    Raw(Vec<Tensor>),
}

fn numerical(e: Error, epoch: usize, batch: usize, records: &[&Record]) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Numerical(format!(
            "non-finite value in {op} at epoch {epoch}, batch {batch} ({})",
            describe(records)
        )),
        other => other,
    }
}

fn describe(records: &[&Record]) -> String {
    records
        .iter()
        .map(|r| r.image_path.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains fuser and decoder on the pooled training images of every class.
///
/// The encoder is never updated. When `test` is given, the model is
/// evaluated at [`eval_epochs`] and the best snapshot kept.
pub fn train(
    model: &mut VitAd,
    index: &DatasetIndex,
    mut test: Option<&mut TestSet>,
    cfg: &RunConfig,
    progress: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config != cfg.model {
        return Err(Error::config("model was built from a different model config"));
    }
    let tc = &cfg.train;
    let records: Vec<&Record> = index.train().collect();
    if records.is_empty() {
        return Err(Error::config("the dataset has no training images"));
    }
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let encoder_fingerprint = model.encoder_fingerprint();
    let size = model.vit().image_size;

    let raw: Vec<Tensor> = records
        .iter()
        .map(|r| load_image(&r.image_path, size))
        .collect::<Result<_>>()?;
    let inputs = if tc.augment.is_active() || !tc.cache_features {
        Inputs::Raw(raw)
    } else {
        let normed: Vec<Tensor> = raw
            .iter()
            .map(|img| normalize(img, &cfg.data.norm))
            .collect::<Result<_>>()?;
        Inputs::Cached(par_map(&normed, cfg.eval.workers, |img| model.encode(img))?)
    };

    let pairs = constrained_pairs(&model.vit().decoder_targets(), &tc.constrained_stages)?;
    let schedule = eval_epochs(tc.epochs, if test.is_some() { tc.eval_points } else { 0 });
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut evals = Vec::new();
    // (selection score, epoch, parameters)
    let mut best: Option<(f64, usize, Snapshot)> = None;

    for epoch in 0..tc.epochs {
        let lr = lr_at(epoch, tc);
        let hp = tc.adamw(lr);
        order.shuffle(&mut stream(tc.seed, SHUFFLE_STREAM + epoch as u64));
        let mut aug_rng = stream(tc.seed, AUGMENT_STREAM + epoch as u64);
        let mut loss_sum = 0.0;

        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let batch_records: Vec<&Record> = batch.iter().map(|&i| records[i]).collect();
            let encoded: Vec<EncodedImage> = match &inputs {
                Inputs::Cached(c) => batch.iter().map(|&i| c[i].clone()).collect(),
                Inputs::Raw(r) => batch
                    .iter()
                    .map(|&i| {
                        let img = augment(&r[i], &tc.augment, &mut aug_rng)?;
                        model.encode(&normalize(&img, &cfg.data.norm)?)
                    })
                    .collect::<Result<_>>()?,
            };
            let loss = step(model, &mut opt, &hp, cfg, &pairs, &encoded)
                .map_err(|e| numerical(e, epoch + 1, b, &batch_records))?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {loss} at epoch {}, batch {b} ({})",
                    epoch + 1,
                    describe(&batch_records)
                )));
            }
            loss_sum += loss * batch.len() as f64;
            if tc.verify_frozen && model.encoder_fingerprint() != encoder_fingerprint {
                return Err(Error::Numerical(format!("encoder changed during epoch {}", epoch + 1)));
            }
        }

        let done = epoch + 1;
        let loss = loss_sum / records.len() as f64;
        epoch_losses.push(loss);
        let mut eval = None;
        if let Some(t) = test.as_deref_mut() {
            if schedule.contains(&done) {
                let ev = evaluate(model, t, &cfg.eval)?;
                let score = ev.mean.selection_score();
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, done, model.named_tensors()));
                }
                let record = EvalRecord {
                    epoch: done,
                    mean: ev.mean,
                    per_class: ev.per_class,
                };
                evals.push(record.clone());
                eval = Some(record);
            }
        }
        progress(&Progress {
            epoch: done,
            epochs: tc.epochs,
            lr,
            loss,
            eval,
        });
    }

    let (best_epoch, best) = match best {
        Some((_, e, t)) => (e, t),
        None => (tc.epochs, model.named_tensors()),
    };
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        dataset_fingerprint: index.fingerprint()?,
        encoder_fingerprint,
        started_unix,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        steps: opt.steps(),
        epoch_losses,
        evals,
        best_epoch,
        final_epoch: tc.epochs,
    };
    Ok(TrainOutcome { manifest, best })
}

/// One optimizer step on a batch; returns the batch-mean loss.
fn step(
    model: &mut VitAd,
    opt: &mut AdamW,
    hp: &super::AdamWParams,
    cfg: &RunConfig,
    pairs: &[(usize, usize)],
    batch: &[EncodedImage],
) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let fuser = model.params.fuser.bind(&mut tape, true);
    let decoder = model.params.decoder.bind(&mut tape, true);
    let mut total: Option<Var> = None;
    for enc in batch {
        let outs = fuse_and_decode(&mut tape, &model.config, &fuser, &decoder, enc)?;
        let mut stage_pairs = Vec::with_capacity(pairs.len());
        for &(stage, d) in pairs {
            let target = enc
                .stage(stage)
                .ok_or_else(|| Error::config(format!("encoder has no stage {stage}")))?;
            stage_pairs.push((tape.constant(target.clone()), outs[d]));
        }
        let l = training_loss(&mut tape, &stage_pairs, cfg.train.loss)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("empty batch"))?;
    let loss = tape.scale(total, 1.0 / batch.len() as f32)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(loss)?;

    let mut vars: HashMap<String, Var> = HashMap::new();
    fuser.map_leaves("fuser", &mut |n, v| {
        vars.insert(n.to_string(), *v);
    });
    decoder.map_leaves("decoder", &mut |n, v| {
        vars.insert(n.to_string(), *v);
    });
    opt.begin_step();
    let mut result = Ok(());
    let mut apply = |name: &str, p: &mut Tensor| {
        if result.is_err() {
            return;
        }
        let Some(g) = vars.get(name).and_then(|&v| grads.get(v)) else {
            return;
        };
        if !g.all_finite() {
            result = Err(Error::Numerical(format!("gradient of {name} is not finite")));
            return;
        }
        result = opt.update(name, p, g, hp);
    };
    model.params.fuser.for_each_leaf_mut("fuser", &mut apply);
    model.params.decoder.for_each_leaf_mut("decoder", &mut apply);
    result?;
    Ok(value)
}

/// Writes `best.vtad`, `final.vtad`, `manifest.json` and `config.txt`.
pub fn write_checkpoints(dir: &Path, model: &VitAd, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_archive(&outcome.best, &dir.join("best.vtad"))?;
    save_archive(&model.named_tensors(), &dir.join("final.vtad"))?;
    let manifest = serde_json::to_string_pretty(&outcome.manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let path = dir.join("manifest.json");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("config.txt");
    fs::write(&path, outcome.manifest.config.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}
