use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry and local design switches of the columnar ViT pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub encoder_layers: usize,
    /// Uniform division count, ignored when `encoder_division_list` is set.
    pub encoder_divisions: usize,
    pub encoder_division_list: Option<Vec<usize>>,
    pub decoder_layers: usize,
    pub decoder_divisions: usize,
    pub decoder_division_list: Option<Vec<usize>>,
    /// Carry a class token through the encoder. It never reaches the stage
    /// features.
    pub use_class_token: bool,
    pub decoder_pos_embed: bool,
    /// Tap the last encoder stage before the final layer norm.
    pub pre_norm_tap: bool,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    /// ViT-S/16 at 256 pixels, encoder 4×3, decoder 3×3.
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 384,
            num_heads: 6,
            mlp_ratio: 4.0,
            encoder_layers: 12,
            encoder_divisions: 4,
            encoder_division_list: None,
            decoder_layers: 9,
            decoder_divisions: 3,
            decoder_division_list: None,
            use_class_token: false,
            decoder_pos_embed: true,
            pre_norm_tap: true,
            ln_eps: 1e-6,
        }
    }
}

impl ViTConfig {
    /// The desk-scale model: 64-pixel input, patch 8, width 64, four heads,
    /// encoder 4×2 and decoder 3×2.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            encoder_layers: 8,
            encoder_divisions: 4,
            decoder_layers: 6,
            decoder_divisions: 3,
            ..Self::default()
        }
    }

    /// ViT-B/16 width, otherwise the defaults.
    pub fn vit_base() -> Self {
        Self {
            embed_dim: 768,
            num_heads: 12,
            ..Self::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn encoder_division_sizes(&self) -> Vec<usize> {
        division_sizes(self.encoder_layers, self.encoder_divisions, &self.encoder_division_list)
    }

    pub fn decoder_division_sizes(&self) -> Vec<usize> {
        division_sizes(self.decoder_layers, self.decoder_divisions, &self.decoder_division_list)
    }

    /// Number of encoder stages `N`.
    pub fn encoder_stage_count(&self) -> usize {
        self.encoder_division_sizes().len()
    }

    pub fn decoder_stage_count(&self) -> usize {
        self.decoder_division_sizes().len()
    }

    /// Encoder stage index reconstructed by each decoder stage, in decoder
    /// order: `N−1, N−2, …`. Index 0 is the patch-embedding stem.
    pub fn decoder_targets(&self) -> Vec<usize> {
        let n = self.encoder_stage_count();
        (1..=self.decoder_stage_count()).map(|j| n - j).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.in_channels == 0 || self.mlp_ratio <= 0.0 || self.ln_eps <= 0.0 {
            return bad("in_channels, mlp_ratio and ln_eps must be positive".into());
        }
        check_divisions(
            "encoder",
            self.encoder_layers,
            self.encoder_divisions,
            &self.encoder_division_list,
        )?;
        check_divisions(
            "decoder",
            self.decoder_layers,
            self.decoder_divisions,
            &self.decoder_division_list,
        )?;
        let n = self.encoder_stage_count();
        let d = self.decoder_stage_count();
        let explicit = self.encoder_division_list.is_some() || self.decoder_division_list.is_some();
        if !explicit && d + 1 != n {
            return bad(format!(
                "decoder_divisions must equal encoder_divisions - 1 ({} vs {}); \
                 supply explicit division lists to override",
                d, n
            ));
        }
        if d > n {
            return bad(format!("{d} decoder stages cannot pair with {n} encoder stages"));
        }
        Ok(())
    }
}

fn division_sizes(layers: usize, divisions: usize, list: &Option<Vec<usize>>) -> Vec<usize> {
    match list {
        Some(l) => l.clone(),
        None if divisions == 0 => Vec::new(),
        None => vec![layers / divisions; divisions],
    }
}

fn check_divisions(which: &str, layers: usize, divisions: usize, list: &Option<Vec<usize>>) -> Result<()> {
    match list {
        Some(l) => {
            if l.is_empty() || l.contains(&0) {
                return Err(Error::Config(format!("{which} division list {l:?} must be nonempty and positive")));
            }
            if l.iter().sum::<usize>() != layers {
                return Err(Error::Config(format!(
                    "{which} division list {l:?} does not sum to {layers} layers"
                )));
            }
        }
        None => {
            if divisions == 0 || layers == 0 || !layers.is_multiple_of(divisions) {
                return Err(Error::Config(format!(
                    "{which}_layers {layers} is not divisible into {divisions} divisions"
                )));
            }
        }
    }
    Ok(())
}
