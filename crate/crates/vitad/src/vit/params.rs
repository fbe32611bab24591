//! Parameter containers.
//!
//! Every container is generic over its leaf type `P`. With
//! `P = Tensor` it stores weights; [`ParamTree::map_leaves`] rebinds the
//! same structure onto a tape (`P = Var`) or into another precision, and
//! names every leaf with a dotted path such as `blocks.3.attn.qkv.weight`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::init::trunc_normal;
use crate::tensor::{Real, Tensor};

use super::config::ViTConfig;

pub const INIT_STD: f32 = 0.02;

pub trait ParamTree {
    type Leaf;
    type Rebind<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &Self::Leaf) -> Q) -> Self::Rebind<Q>;

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Self::Leaf));

    fn leaf_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.map_leaves(prefix, &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Helpers for trees whose leaves are tensors.
pub trait TensorTree<T: Real>: ParamTree<Leaf = Tensor<T>> {
    /// Puts every leaf on the tape, as tracked parameters when `trainable`.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Self::Rebind<Var> {
        self.map_leaves("", &mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.map_leaves(prefix, &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.map_leaves("", &mut |_, t| n += t.numel());
        n
    }
}

impl<T: Real, X: ParamTree<Leaf = Tensor<T>>> TensorTree<T> for X {}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    /// `[in, out]`
    pub weight: P,
    /// `[out]`
    pub bias: P,
}

impl Linear<Tensor> {
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: trunc_normal([inputs, outputs], INIT_STD, rng),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros([inputs, outputs]),
            bias: Tensor::zeros([outputs]),
        }
    }

    pub fn identity(width: usize) -> Self {
        let mut weight = Tensor::zeros([width, width]);
        for i in 0..width {
            weight.data_mut()[i * width + i] = 1.0;
        }
        Self {
            weight,
            bias: Tensor::zeros([width]),
        }
    }
}

impl<P> ParamTree for Linear<P> {
    type Leaf = P;
    type Rebind<Q> = Linear<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}

impl Norm<Tensor> {
    pub fn init(width: usize) -> Self {
        Self {
            gamma: Tensor::ones([width]),
            beta: Tensor::zeros([width]),
        }
    }
}

impl<P> ParamTree for Norm<P> {
    type Leaf = P;
    type Rebind<Q> = Norm<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub norm1: Norm<P>,
    pub qkv: Linear<P>,
    pub proj: Linear<P>,
    pub norm2: Norm<P>,
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}

impl Block<Tensor> {
    pub fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.embed_dim;
        Self {
            norm1: Norm::init(c),
            qkv: Linear::init(c, 3 * c, rng),
            proj: Linear::init(c, c, rng),
            norm2: Norm::init(c),
            fc1: Linear::init(c, cfg.mlp_hidden(), rng),
            fc2: Linear::init(cfg.mlp_hidden(), c, rng),
        }
    }
}

impl<P> ParamTree for Block<P> {
    type Leaf = P;
    type Rebind<Q> = Block<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Block<Q> {
        Block {
            norm1: self.norm1.map_leaves(&join(prefix, "norm1"), f),
            qkv: self.qkv.map_leaves(&join(prefix, "attn.qkv"), f),
            proj: self.proj.map_leaves(&join(prefix, "attn.proj"), f),
            norm2: self.norm2.map_leaves(&join(prefix, "norm2"), f),
            fc1: self.fc1.map_leaves(&join(prefix, "mlp.fc1"), f),
            fc2: self.fc2.map_leaves(&join(prefix, "mlp.fc2"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.norm1.for_each_leaf_mut(&join(prefix, "norm1"), f);
        self.qkv.for_each_leaf_mut(&join(prefix, "attn.qkv"), f);
        self.proj.for_each_leaf_mut(&join(prefix, "attn.proj"), f);
        self.norm2.for_each_leaf_mut(&join(prefix, "norm2"), f);
        self.fc1.for_each_leaf_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.for_each_leaf_mut(&join(prefix, "mlp.fc2"), f);
    }
}

impl<P> ParamTree for Vec<Block<P>> {
    type Leaf = P;
    type Rebind<Q> = Vec<Block<Q>>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Vec<Block<Q>> {
        self.iter()
            .enumerate()
            .map(|(i, b)| b.map_leaves(&join(prefix, &i.to_string()), f))
            .collect()
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, b) in self.iter_mut().enumerate() {
            b.for_each_leaf_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<P> {
    /// Patch projection, `[in_channels·patch², embed_dim]`.
    pub patch_embed: Linear<P>,
    /// `[1, embed_dim]`, only with `use_class_token`.
    pub cls_token: Option<P>,
    /// `[tokens, embed_dim]`; the class token's row comes first when present.
    pub pos_embed: P,
    pub blocks: Vec<Block<P>>,
    pub norm: Norm<P>,
}

impl Encoder<Tensor> {
    pub fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.embed_dim;
        let tokens = cfg.num_patches() + usize::from(cfg.use_class_token);
        let patch_embed = Linear::init(cfg.patch_dim(), c, rng);
        let cls_token = cfg.use_class_token.then(|| trunc_normal([1, c], INIT_STD, rng));
        let pos_embed = trunc_normal([tokens, c], INIT_STD, rng);
        let blocks = (0..cfg.encoder_layers).map(|_| Block::init(cfg, rng)).collect();
        Self {
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: Norm::init(c),
        }
    }
}

impl<P> ParamTree for Encoder<P> {
    type Leaf = P;
    type Rebind<Q> = Encoder<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Encoder<Q> {
        Encoder {
            patch_embed: self.patch_embed.map_leaves(&join(prefix, "patch_embed"), f),
            cls_token: self.cls_token.as_ref().map(|t| f(&join(prefix, "cls_token"), t)),
            pos_embed: f(&join(prefix, "pos_embed"), &self.pos_embed),
            blocks: self.blocks.map_leaves(&join(prefix, "blocks"), f),
            norm: self.norm.map_leaves(&join(prefix, "norm"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.patch_embed.for_each_leaf_mut(&join(prefix, "patch_embed"), f);
        if let Some(t) = self.cls_token.as_mut() {
            f(&join(prefix, "cls_token"), t);
        }
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        self.blocks.for_each_leaf_mut(&join(prefix, "blocks"), f);
        self.norm.for_each_leaf_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<P> {
    /// `[tokens, embed_dim]`, only with `decoder_pos_embed`.
    pub pos_embed: Option<P>,
    pub blocks: Vec<Block<P>>,
}

impl Decoder<Tensor> {
    pub fn init(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Self {
        let pos_embed = cfg
            .decoder_pos_embed
            .then(|| trunc_normal([cfg.num_patches(), cfg.embed_dim], INIT_STD, rng));
        let blocks = (0..cfg.decoder_layers).map(|_| Block::init(cfg, rng)).collect();
        Self { pos_embed, blocks }
    }
}

impl<P> ParamTree for Decoder<P> {
    type Leaf = P;
    type Rebind<Q> = Decoder<Q>;

    fn map_leaves<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Decoder<Q> {
        Decoder {
            pos_embed: self.pos_embed.as_ref().map(|t| f(&join(prefix, "pos_embed"), t)),
            blocks: self.blocks.map_leaves(&join(prefix, "blocks"), f),
        }
    }

    fn for_each_leaf_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        if let Some(t) = self.pos_embed.as_mut() {
            f(&join(prefix, "pos_embed"), t);
        }
        self.blocks.for_each_leaf_mut(&join(prefix, "blocks"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::stream;

    #[test]
    fn leaf_names_are_dotted_paths() {
        let cfg = ViTConfig::toy();
        let enc = Encoder::init(&cfg, &mut stream(0, 0));
        let names = enc.leaf_names("encoder");
        assert_eq!(names[0], "encoder.patch_embed.weight");
        assert!(names.contains(&"encoder.blocks.7.mlp.fc2.bias".to_string()));
        assert!(names.contains(&"encoder.norm.gamma".to_string()));
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn cast_round_trip_is_lossless() {
        let cfg = ViTConfig::toy();
        let dec = Decoder::init(&cfg, &mut stream(1, 1));
        let wide = dec.map_leaves("", &mut |_, t| t.cast::<f64>());
        let back = wide.map_leaves("", &mut |_, t| t.cast::<f32>());
        assert_eq!(dec, back);
    }
}
