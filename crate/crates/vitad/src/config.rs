//! Flat `key = value` configuration over every run setting.
//!
//! Keys are dotted paths such as `train.lr` or `model.patch_size`. A config
//! file holds one assignment per line with `#` comments; command-line
//! overrides use the same keys. [`RunConfig::to_text`] renders every key, so
//! a resolved config can be read back to the identical value.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{DefectKind, NormStats, SynthConfig};
use crate::error::{Error, Result};
use crate::io::load_archive;
use crate::meta_ad::{ModelConfig, VitAd};
use crate::metrics::AuproSweep;
use crate::scoring::constrained_pairs;
use crate::train::{EvalConfig, TrainConfig};
use crate::vit::ViTConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub norm: NormStats,
    /// Classes to use; empty means all.
    pub classes: Vec<String>,
    /// Archive with `encoder.*` tensors replacing the random encoder.
    pub encoder_weights: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p)).collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[f32; 3]> {
    let v: Vec<f32> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::config(format!("{key}: expected three comma-separated values")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "none".into())
}

fn opt_list(v: &Option<Vec<usize>>) -> String {
    v.as_ref().map(|l| list(l)).unwrap_or_else(|| "none".into())
}

impl RunConfig {
    /// Paper recipe with the desk-scale toy ViT.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.model.vit = ViTConfig::toy();
        cfg
    }

    /// Applies one assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let vit = &mut self.model.vit;
        let t = &mut self.train;
        let e = &mut self.eval;
        let s = &mut self.synth;
        match key {
            "model.preset" => {
                *vit = match value.trim() {
                    "vit_small" => ViTConfig::default(),
                    "vit_base" => ViTConfig::vit_base(),
                    "toy" => ViTConfig::toy(),
                    other => return Err(Error::config(format!("model.preset: unknown preset {other:?}"))),
                }
            }
            "model.image_size" => vit.image_size = parse(key, value)?,
            "model.patch_size" => vit.patch_size = parse(key, value)?,
            "model.in_channels" => vit.in_channels = parse(key, value)?,
            "model.embed_dim" => vit.embed_dim = parse(key, value)?,
            "model.num_heads" => vit.num_heads = parse(key, value)?,
            "model.mlp_ratio" => vit.mlp_ratio = parse(key, value)?,
            "model.encoder_layers" => vit.encoder_layers = parse(key, value)?,
            "model.encoder_divisions" => vit.encoder_divisions = parse(key, value)?,
            "model.encoder_division_list" => vit.encoder_division_list = parse_opt_list(key, value)?,
            "model.decoder_layers" => vit.decoder_layers = parse(key, value)?,
            "model.decoder_divisions" => vit.decoder_divisions = parse(key, value)?,
            "model.decoder_division_list" => vit.decoder_division_list = parse_opt_list(key, value)?,
            "model.use_class_token" => vit.use_class_token = parse_bool(key, value)?,
            "model.decoder_pos_embed" => vit.decoder_pos_embed = parse_bool(key, value)?,
            "model.pre_norm_tap" => vit.pre_norm_tap = parse_bool(key, value)?,
            "model.ln_eps" => vit.ln_eps = parse(key, value)?,
            "model.seed" => self.model.seed = parse(key, value)?,
            "model.encoder_weights" => {
                self.data.encoder_weights = match value.trim() {
                    "" | "none" => None,
                    p => Some(PathBuf::from(p)),
                }
            }
            "fuser.variant" => self.model.fuser.variant = value.parse()?,
            "fuser.resize_policy" => match value.trim() {
                "identity" => {}
                other => return Err(Error::config(format!("fuser.resize_policy: unknown policy {other:?}"))),
            },
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.lr_drop_epoch" => t.lr_drop_epoch = parse(key, value)?,
            "train.lr_drop_factor" => t.lr_drop_factor = parse(key, value)?,
            "train.schedule" => t.schedule = value.trim().parse()?,
            "train.eval_points" => t.eval_points = parse(key, value)?,
            "train.loss" => t.loss = value.trim().parse()?,
            "train.constrained_stages" => t.constrained_stages = parse_list(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.cache_features" => t.cache_features = parse_bool(key, value)?,
            "train.verify_frozen" => t.verify_frozen = parse_bool(key, value)?,
            "train.augment.center_crop" => t.augment.center_crop = parse_bool(key, value)?,
            "train.augment.color_jitter" => t.augment.color_jitter = parse(key, value)?,
            "train.augment.hflip" => t.augment.hflip = parse_bool(key, value)?,
            "train.augment.rotation" => t.augment.rotation = parse(key, value)?,
            "train.augment.random_resized_crop" => t.augment.random_resized_crop = parse_bool(key, value)?,
            "eval.stages" => e.scoring.stages = parse_list(key, value)?,
            "eval.pool_window" => e.scoring.pool_window = parse_opt(key, value)?,
            "eval.smoothing_sigma" => e.scoring.smoothing_sigma = parse_opt(key, value)?,
            "eval.fpr_cap" => e.metrics.fpr_cap = parse(key, value)?,
            "eval.aupro_bins" => {
                e.metrics.aupro_sweep = match parse::<usize>(key, value)? {
                    0 => AuproSweep::Exact,
                    n => AuproSweep::Quantized(n),
                }
            }
            "eval.workers" => e.workers = parse(key, value)?,
            "eval.oracle_masks" => e.oracle_masks = parse_bool(key, value)?,
            "data.mean" => self.data.norm.mean = parse_triple(key, value)?,
            "data.std" => self.data.norm.std = parse_triple(key, value)?,
            "data.classes" => self.data.classes = parse_list(key, value)?,
            "synth.num_classes" => s.num_classes = parse(key, value)?,
            "synth.train_per_class" => s.train_per_class = parse(key, value)?,
            "synth.test_normal_per_class" => s.test_normal_per_class = parse(key, value)?,
            "synth.test_anomaly_per_class" => s.test_anomaly_per_class = parse(key, value)?,
            "synth.image_size" => s.image_size = parse(key, value)?,
            "synth.defect_types" => s.defect_types = parse_list::<DefectKind>(key, value)?,
            "synth.seed" => s.seed = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let vit = &self.model.vit;
        let t = &self.train;
        let e = &self.eval;
        let s = &self.synth;
        let aupro_bins = match e.metrics.aupro_sweep {
            AuproSweep::Exact => 0,
            AuproSweep::Quantized(n) => n,
        };
        vec![
            ("model.image_size", vit.image_size.to_string()),
            ("model.patch_size", vit.patch_size.to_string()),
            ("model.in_channels", vit.in_channels.to_string()),
            ("model.embed_dim", vit.embed_dim.to_string()),
            ("model.num_heads", vit.num_heads.to_string()),
            ("model.mlp_ratio", vit.mlp_ratio.to_string()),
            ("model.encoder_layers", vit.encoder_layers.to_string()),
            ("model.encoder_divisions", vit.encoder_divisions.to_string()),
            ("model.encoder_division_list", opt_list(&vit.encoder_division_list)),
            ("model.decoder_layers", vit.decoder_layers.to_string()),
            ("model.decoder_divisions", vit.decoder_divisions.to_string()),
            ("model.decoder_division_list", opt_list(&vit.decoder_division_list)),
            ("model.use_class_token", vit.use_class_token.to_string()),
            ("model.decoder_pos_embed", vit.decoder_pos_embed.to_string()),
            ("model.pre_norm_tap", vit.pre_norm_tap.to_string()),
            ("model.ln_eps", vit.ln_eps.to_string()),
            ("model.seed", self.model.seed.to_string()),
            (
                "model.encoder_weights",
                opt(&self.data.encoder_weights.as_ref().map(|p| p.display().to_string())),
            ),
            ("fuser.variant", self.model.fuser.variant.to_string()),
            ("fuser.resize_policy", "identity".into()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.lr_drop_epoch", t.lr_drop_epoch.to_string()),
            ("train.lr_drop_factor", t.lr_drop_factor.to_string()),
            ("train.schedule", t.schedule.to_string()),
            ("train.eval_points", t.eval_points.to_string()),
            ("train.loss", t.loss.to_string()),
            ("train.constrained_stages", list(&t.constrained_stages)),
            ("train.seed", t.seed.to_string()),
            ("train.cache_features", t.cache_features.to_string()),
            ("train.verify_frozen", t.verify_frozen.to_string()),
            ("train.augment.center_crop", t.augment.center_crop.to_string()),
            ("train.augment.color_jitter", t.augment.color_jitter.to_string()),
            ("train.augment.hflip", t.augment.hflip.to_string()),
            ("train.augment.rotation", t.augment.rotation.to_string()),
            ("train.augment.random_resized_crop", t.augment.random_resized_crop.to_string()),
            ("eval.stages", list(&e.scoring.stages)),
            ("eval.pool_window", opt(&e.scoring.pool_window)),
            ("eval.smoothing_sigma", opt(&e.scoring.smoothing_sigma)),
            ("eval.fpr_cap", e.metrics.fpr_cap.to_string()),
            ("eval.aupro_bins", aupro_bins.to_string()),
            ("eval.workers", e.workers.to_string()),
            ("eval.oracle_masks", e.oracle_masks.to_string()),
            ("data.mean", list(&self.data.norm.mean)),
            ("data.std", list(&self.data.norm.std)),
            ("data.classes", list(&self.data.classes)),
            ("synth.num_classes", s.num_classes.to_string()),
            ("synth.train_per_class", s.train_per_class.to_string()),
            ("synth.test_normal_per_class", s.test_normal_per_class.to_string()),
            ("synth.test_anomaly_per_class", s.test_anomaly_per_class.to_string()),
            ("synth.image_size", s.image_size.to_string()),
            ("synth.defect_types", list(&s.defect_types)),
            ("synth.seed", s.seed.to_string()),
        ]
    }

    pub fn is_key(key: &str) -> bool {
        key == "model.preset" || Self::default().entries().iter().any(|(k, _)| *k == key)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies every assignment in `text`, in order.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Cross-section checks on top of each section's own invariants.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let targets = self.model.vit.decoder_targets();
        constrained_pairs(&targets, &self.train.constrained_stages)
            .map_err(|e| Error::config(format!("train.constrained_stages: {e}")))?;
        constrained_pairs(&targets, &self.eval.scoring.stages)
            .map_err(|e| Error::config(format!("eval.stages: {e}")))?;
        if let Some(w) = self.eval.scoring.pool_window {
            if w == 0 || w > self.model.vit.image_size {
                return Err(Error::config(format!("eval.pool_window {w} does not fit the image")));
            }
        }
        if !(self.eval.metrics.fpr_cap > 0.0 && self.eval.metrics.fpr_cap <= 1.0) {
            return Err(Error::config("eval.fpr_cap must be in (0, 1]"));
        }
        if self.eval.workers == 0 {
            return Err(Error::config("eval.workers must be at least 1"));
        }
        if self.data.norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("data.std must be positive"));
        }
        Ok(())
    }

    /// Builds the model, loading encoder weights when configured.
    pub fn build_model(&self) -> Result<VitAd> {
        let mut model = VitAd::new(self.model.clone())?;
        if let Some(path) = &self.data.encoder_weights {
            model.load_encoder(&load_archive(path)?)?;
        }
        Ok(model)
    }

    /// The one-line training summary echoed at start-up.
    pub fn train_summary(&self) -> String {
        format!(
            "lr={:e} wd={:e} bs={} epochs={}",
            self.train.lr, self.train.weight_decay, self.train.batch_size, self.train.epochs
        )
    }
}

fn parse_opt_list(key: &str, value: &str) -> Result<Option<Vec<usize>>> {
    match value.trim() {
        "" | "none" => Ok(None),
        v => parse_list(key, v).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_ad::FuserVariant;
    use crate::scoring::LossKind;

    #[test]
    fn defaults_echo_the_recipe() {
        assert_eq!(RunConfig::default().train_summary(), "lr=1e-4 wd=1e-4 bs=8 epochs=100");
    }

    #[test]
    fn text_round_trip_of_non_defaults() {
        let mut cfg = RunConfig::toy();
        cfg.apply_text(
            "# overrides\n\
             train.lr = 3e-4\n\
             train.loss = mse   # per-element\n\
             fuser.variant = concat_stages(1234)\n\
             model.decoder_division_list = 2,2,2\n\
             eval.pool_window = 4\n\
             eval.aupro_bins = 200\n\
             data.classes = weave,mesh\n\
             synth.defect_types = scratch_line\n\
             train.augment.rotation = 10\n\
             model.encoder_weights = /tmp/enc.vtad\n",
        )
        .unwrap();
        assert_eq!(cfg.train.loss, LossKind::Mse);
        assert_eq!(cfg.model.fuser.variant, FuserVariant::ConcatStages(vec![1, 2, 3, 4]));
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_entry_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("train.momentum", "0.9").is_err());
        assert!(cfg.set("train.lr", "fast").is_err());
        assert!(cfg.apply_text("train.lr 0.1").is_err());
        assert!(cfg.set("model.preset", "vit_huge").is_err());
    }

    #[test]
    fn division_mismatch_needs_explicit_lists() {
        let mut cfg = RunConfig::toy();
        cfg.set("model.encoder_divisions", "4").unwrap();
        cfg.set("model.decoder_divisions", "2").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("model.decoder_division_list", "3,3").unwrap();
        cfg.set("model.encoder_division_list", "2,2,2,2").unwrap();
        cfg.set("train.constrained_stages", "3,2").unwrap();
        cfg.set("eval.stages", "3,2").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn constrained_stage_must_be_reconstructed() {
        let mut cfg = RunConfig::toy();
        cfg.set("train.constrained_stages", "1,4").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("train.constrained_stages", "0,1,2,3").unwrap();
        assert!(cfg.validate().is_err());
    }
}
