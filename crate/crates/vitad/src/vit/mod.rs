//! Columnar ViT: patch embedding, pre-norm blocks, a stage-divided encoder
//! and a decoder built from the same block type.

mod config;
mod forward;
mod params;

pub use config::ViTConfig;
pub use forward::{attention_block, decoder_forward, encoder_forward, patch_embed, patchify, EncoderTaps};
pub use params::{Block, Decoder, Encoder, Linear, Norm, ParamTree, TensorTree, INIT_STD};

pub(crate) use params::join;

use crate::tensor::{Real, Tensor, TensorResult};

/// Per-stage token grids. Each stage is stored token-major as `[h·w, C]`;
/// [`StageFeatures::to_chw`] gives the channel-major view.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures<T = f32> {
    pub grid: (usize, usize),
    pub stages: Vec<Tensor<T>>,
}

impl<T: Real> StageFeatures<T> {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn channels(&self, i: usize) -> usize {
        self.stages[i].cols()
    }

    /// Stage `i` as `[C, h, w]`.
    pub fn to_chw(&self, i: usize) -> TensorResult<Tensor<T>> {
        let (h, w) = self.grid;
        let c = self.channels(i);
        self.stages[i].transpose()?.reshape([c, h, w])
    }

    pub fn all_finite(&self) -> bool {
        self.stages.iter().all(Tensor::all_finite)
    }
}
