use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the two-token vision transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 16,
            patch_side: 4,
            channels: 1,
            embed_dim: 32,
            num_heads: 4,
            depth: 3,
            mlp_ratio: 2,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.image_side", self.image_side),
            ("model.patch_side", self.patch_side),
            ("model.channels", self.channels),
            ("model.embed_dim", self.embed_dim),
            ("model.num_heads", self.num_heads),
            ("model.depth", self.depth),
            ("model.mlp_ratio", self.mlp_ratio),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::field(name, "must be positive"));
            }
        }
        if !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::field(
                "model.patch_side",
                format!("{} does not divide image_side {}", self.patch_side, self.image_side),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::field(
                "model.num_heads",
                format!("{} does not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::field("model.num_classes", "need at least 2 classes"));
        }
        Ok(())
    }

    /// Patches per image.
    pub fn num_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    /// Patches plus the two classification tokens.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Length of one flattened patch.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Index of the `[src]` token in the sequence.
    pub fn src_index(&self) -> usize {
        0
    }

    /// Index of the `[tgt]` token in the sequence.
    pub fn tgt_index(&self) -> usize {
        self.seq_len() - 1
    }
}
