//! Forward passes on a [`Tape`].

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, TensorError};

use super::config::ViTConfig;
use super::params::{Block, Decoder, Encoder};

/// Cuts a `[C, H, W]` image into non-overlapping patches, one row per patch
/// in raster order, each row laid out `(channel, dy, dx)`.
pub fn patchify<T: Real>(image: &Tensor<T>, cfg: &ViTConfig) -> Result<Tensor<T>> {
    let expected = [cfg.in_channels, cfg.image_size, cfg.image_size];
    if image.shape() != expected {
        return Err(TensorError::Shape {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        }
        .into());
    }
    let (c, size, p) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
    let side = size / p;
    let mut out = Vec::with_capacity(image.numel());
    for py in 0..side {
        for px in 0..side {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * size + py * p + dy) * size + px * p;
                    out.extend_from_slice(&image.data()[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::new([side * side, cfg.patch_dim()], out)?)
}

/// Patch tokens plus their position embedding, `[h·w, C]`. The class token
/// row of the position embedding is skipped.
pub fn patch_embed<T: Real>(tape: &mut Tape<T>, enc: &Encoder<Var>, cfg: &ViTConfig, image: &Tensor<T>) -> Result<Var> {
    let patches = tape.constant(patchify(image, cfg)?);
    let tokens = tape.linear(patches, enc.patch_embed.weight, enc.patch_embed.bias)?;
    let pos = if enc.cls_token.is_some() {
        tape.slice_rows(enc.pos_embed, 1, cfg.num_patches())?
    } else {
        enc.pos_embed
    };
    Ok(tape.add(tokens, pos)?)
}

/// `x + MHSA(LN(x))`, then `+ MLP(LN(·))`.
pub fn attention_block<T: Real>(tape: &mut Tape<T>, block: &Block<Var>, x: Var, cfg: &ViTConfig) -> Result<Var> {
    let c = tape.value(x).cols();
    if cfg.num_heads == 0 || !c.is_multiple_of(cfg.num_heads) {
        return Err(Error::config(format!("{c} channels cannot be split into {} heads", cfg.num_heads)));
    }
    let eps = T::lit(cfg.ln_eps);
    let head_dim = c / cfg.num_heads;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());

    let h = tape.layer_norm(x, block.norm1.gamma, block.norm1.beta, eps)?;
    let qkv = tape.linear(h, block.qkv.weight, block.qkv.bias)?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let q = tape.slice_cols(qkv, head * head_dim, head_dim)?;
        let k = tape.slice_cols(qkv, c + head * head_dim, head_dim)?;
        let v = tape.slice_cols(qkv, 2 * c + head * head_dim, head_dim)?;
        let q = tape.scale(q, scale)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let weights = tape.softmax(scores)?;
        heads.push(tape.matmul(weights, v)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    let attn = tape.linear(merged, block.proj.weight, block.proj.bias)?;
    let x = tape.add(x, attn)?;

    let h = tape.layer_norm(x, block.norm2.gamma, block.norm2.beta, eps)?;
    let h = tape.linear(h, block.fc1.weight, block.fc1.bias)?;
    let h = tape.gelu(h)?;
    let h = tape.linear(h, block.fc2.weight, block.fc2.bias)?;
    Ok(tape.add(x, h)?)
}

/// Tape handles of the encoder taps.
#[derive(Clone, Debug)]
pub struct EncoderTaps {
    /// Patch-embedding output, the stage-0 feature.
    pub stem: Var,
    /// `F_1 … F_N`, each `[h·w, C]`.
    pub stages: Vec<Var>,
}

pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    enc: &Encoder<Var>,
    cfg: &ViTConfig,
    image: &Tensor<T>,
) -> Result<EncoderTaps> {
    let n = cfg.num_patches();
    let stem = patch_embed(tape, enc, cfg, image)?;
    let mut x = match enc.cls_token {
        Some(cls) => {
            let cls_pos = tape.slice_rows(enc.pos_embed, 0, 1)?;
            let cls = tape.add(cls, cls_pos)?;
            tape.concat_rows(&[cls, stem])?
        }
        None => stem,
    };
    let spatial = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
        Ok(if enc.cls_token.is_some() {
            tape.slice_rows(x, 1, n)?
        } else {
            x
        })
    };

    let divisions = cfg.encoder_division_sizes();
    let mut stages = Vec::with_capacity(divisions.len());
    let mut blocks = enc.blocks.iter();
    for (i, &size) in divisions.iter().enumerate() {
        for block in blocks.by_ref().take(size) {
            x = attention_block(tape, block, x, cfg)?;
        }
        let last = i + 1 == divisions.len();
        let tap = if last && !cfg.pre_norm_tap {
            tape.layer_norm(x, enc.norm.gamma, enc.norm.beta, T::lit(cfg.ln_eps))?
        } else {
            x
        };
        stages.push(spatial(tape, tap)?);
    }
    Ok(EncoderTaps { stem, stages })
}

/// Runs the decoder from the fused feature. Outputs are in decoder order and
/// reconstruct encoder stages `N−1, N−2, …`.
pub fn decoder_forward<T: Real>(tape: &mut Tape<T>, dec: &Decoder<Var>, cfg: &ViTConfig, fused: Var) -> Result<Vec<Var>> {
    let expected = [cfg.num_patches(), cfg.embed_dim];
    if tape.value(fused).shape() != expected {
        return Err(TensorError::Shape {
            op: "decoder_forward",
            lhs: tape.value(fused).shape().to_vec(),
            rhs: expected.to_vec(),
        }
        .into());
    }
    let mut x = match dec.pos_embed {
        Some(pos) if cfg.decoder_pos_embed => tape.add(fused, pos)?,
        _ => fused,
    };
    let divisions = cfg.decoder_division_sizes();
    let mut outputs = Vec::with_capacity(divisions.len());
    let mut blocks = dec.blocks.iter();
    for &size in &divisions {
        for block in blocks.by_ref().take(size) {
            x = attention_block(tape, block, x, cfg)?;
        }
        outputs.push(x);
    }
    Ok(outputs)
}
