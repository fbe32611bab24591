//! Encoder → fuser → decoder composition.
//!
//! The encoder is a frozen feature extractor producing stage features
//! `F_1 … F_N`. The fuser maps them to one token grid `F̂_f`, and the decoder
//! reconstructs `F̂_{N−1} … F̂_1` from it. Anomalies are wherever the
//! reconstruction disagrees with the encoder.

mod fuser;

pub use fuser::{fuse, Bottleneck, Fuser, FuserConfig, FuserVariant, ResizePolicy};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::stream;
use crate::tensor::{Real, Tensor};
use crate::vit::{decoder_forward, encoder_forward, join, Decoder, Encoder, ParamTree, StageFeatures, TensorTree, ViTConfig};

/// Generator streams for the three parameter groups.
const ENCODER_STREAM: u64 = 0;
const DECODER_STREAM: u64 = 1;
const FUSER_STREAM: u64 = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub fuser: FuserConfig,
    /// Seed for every randomly initialized parameter group.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.fuser.validate(&self.vit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaAdParams<P> {
    pub encoder: Encoder<P>,
    pub fuser: Fuser<P>,
    pub decoder: Decoder<P>,
}

impl<P> ParamTree for MetaAdParams<P> {
    type Leaf = P;
    type Rebind<Q> = MetaAdParams<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> MetaAdParams<Q> {
        MetaAdParams {
            encoder: self.encoder.map_leaves(&join(prefix, "encoder"), f),
            fuser: self.fuser.map_leaves(&join(prefix, "fuser"), f),
            decoder: self.decoder.map_leaves(&join(prefix, "decoder"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.encoder.for_each_leaf_mut(&join(prefix, "encoder"), f);
        self.fuser.for_each_leaf_mut(&join(prefix, "fuser"), f);
        self.decoder.for_each_leaf_mut(&join(prefix, "decoder"), f);
    }
}

/// Frozen encoder output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage<T = f32> {
    pub stem: Tensor<T>,
    pub stages: StageFeatures<T>,
}

impl<T: Real> EncodedImage<T> {
    /// Encoder feature for stage `i`; 0 is the stem.
    pub fn stage(&self, i: usize) -> Option<&Tensor<T>> {
        match i {
            0 => Some(&self.stem),
            i => self.stages.stages.get(i - 1),
        }
    }
}

/// Encoder stages, decoder stages and the pairing between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction<T = f32> {
    pub encoded: EncodedImage<T>,
    /// `F̂` in decoder order.
    pub decoder: StageFeatures<T>,
    /// Encoder stage index reconstructed by each decoder stage.
    pub targets: Vec<usize>,
}

impl<T: Real> Reconstruction<T> {
    /// `(F_i, F̂_i)` for encoder stage `i`, when the decoder reconstructs it.
    pub fn pair(&self, stage: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        let j = self.targets.iter().position(|&t| t == stage)?;
        Some((self.encoded.stage(stage)?, &self.decoder.stages[j]))
    }

    pub fn paired_stages(&self) -> &[usize] {
        &self.targets
    }
}

/// A ViTAD model: frozen encoder, trainable fuser and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VitAd {
    pub config: ModelConfig,
    pub params: MetaAdParams<Tensor>,
    /// Always set; optimizer steps refuse to touch a frozen encoder.
    pub encoder_frozen: bool,
}

impl VitAd {
    /// Random initialization. The encoder stands in for pretrained weights
    /// until [`VitAd::load_encoder`] replaces it.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vit = &config.vit;
        let encoder = Encoder::init(vit, &mut stream(config.seed, ENCODER_STREAM));
        let decoder = Decoder::init(vit, &mut stream(config.seed, DECODER_STREAM));
        let fuser = Fuser::init(&config.fuser, vit, &mut stream(config.seed, FUSER_STREAM));
        Ok(Self {
            config,
            params: MetaAdParams { encoder, fuser, decoder },
            encoder_frozen: true,
        })
    }

    pub fn vit(&self) -> &ViTConfig {
        &self.config.vit
    }

    /// Overwrites encoder weights from `encoder.*` entries.
    pub fn load_encoder(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        load_named(&mut self.params.encoder, "encoder", tensors)
    }

    /// Overwrites every parameter from an archive's tensors.
    pub fn load_all(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        load_named(&mut self.params, "", tensors)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.named_tensors("")
    }

    /// SHA-256 over encoder names, shapes and little-endian values.
    pub fn encoder_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.encoder.named_tensors("encoder") {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn encode(&self, image: &Tensor) -> Result<EncodedImage> {
        let vit = self.vit();
        let mut tape = Tape::new();
        let enc = self.params.encoder.bind(&mut tape, false);
        let taps = encoder_forward(&mut tape, &enc, vit, image)?;
        Ok(EncodedImage {
            stem: tape.value(taps.stem).clone(),
            stages: StageFeatures {
                grid: (vit.grid_side(), vit.grid_side()),
                stages: taps.stages.iter().map(|&v| tape.value(v).clone()).collect(),
            },
        })
    }

    /// Fuser and decoder applied to already-encoded features.
    pub fn reconstruct(&self, encoded: &EncodedImage) -> Result<Reconstruction> {
        let vit = self.vit();
        let mut tape = Tape::new();
        let fuser = self.params.fuser.bind(&mut tape, false);
        let decoder = self.params.decoder.bind(&mut tape, false);
        let outs = fuse_and_decode(&mut tape, &self.config, &fuser, &decoder, encoded)?;
        Ok(Reconstruction {
            encoded: encoded.clone(),
            decoder: StageFeatures {
                grid: (vit.grid_side(), vit.grid_side()),
                stages: outs.iter().map(|&v| tape.value(v).clone()).collect(),
            },
            targets: vit.decoder_targets(),
        })
    }

    /// Full forward pass on a normalized `[3, H, W]` image.
    pub fn forward(&self, image: &Tensor) -> Result<Reconstruction> {
        let encoded = self.encode(image)?;
        self.reconstruct(&encoded)
    }
}

/// Puts cached encoder features on the tape and runs fuser and decoder.
pub fn fuse_and_decode<T: Real>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    fuser: &Fuser<Var>,
    decoder: &Decoder<Var>,
    encoded: &EncodedImage<T>,
) -> Result<Vec<Var>> {
    let stem = tape.constant(encoded.stem.clone());
    let stages: Vec<Var> = encoded.stages.stages.iter().map(|s| tape.constant(s.clone())).collect();
    let fused = fuse(tape, fuser, &config.fuser, &config.vit, stem, &stages)?;
    decoder_forward(tape, decoder, &config.vit, fused)
}

fn load_named<X: ParamTree<Leaf = Tensor>>(tree: &mut X, prefix: &str, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    tree.for_each_leaf_mut(prefix, &mut |name, t| match tensors.iter().find(|(n, _)| n == name) {
        Some((_, src)) if src.shape() == t.shape() => *t = src.clone(),
        Some((_, src)) => mismatched.push(format!("{name}: {:?} vs {:?}", src.shape(), t.shape())),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!("archive lacks tensors: {}", missing.join(", "))));
    }
    if !mismatched.is_empty() {
        return Err(Error::Format(format!("shape mismatch: {}", mismatched.join("; "))));
    }
    Ok(())
}
