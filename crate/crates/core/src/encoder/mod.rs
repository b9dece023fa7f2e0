//! Image encoder: a small pre-norm vision transformer, low-rank adapters on its
//! attention projections, and the EMA teacher.

mod attention;
mod lora;
pub(crate) mod nn;
mod vit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{attention_forward, lora_effective_weight};
pub use lora::{ema_update, init_lora, merge_lora, LoraConfig, LoraPair, LoraParams, Target, TeacherState};
pub use vit::{Block, Encoder, ForwardCache, GradMode, Grads, QkvGrads, StemWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    /// 32x32 RGB, patch 4, depth 4, width 64, 4 heads, 64-d embeddings, 4x MLP.
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            depth: 4,
            width: 64,
            heads: 4,
            embed_dim: 64,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.depth == 0 || self.embed_dim < 2 || self.mlp_ratio == 0 {
            return bad("depth, mlp_ratio must be >= 1 and embed_dim >= 2".into());
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}
