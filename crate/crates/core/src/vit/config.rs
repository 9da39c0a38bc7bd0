use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merger::MergerConfig;

/// Architecture of a (merger-)ViT variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub use_cls_token: bool,
    #[serde(default)]
    pub merger: Option<MergerConfig>,
    /// Head pooling; by default the cls token when it reaches the head, else the mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooling: Option<Pooling>,
}

fn default_channels() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// How the classifier reads the final token set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    Mean,
}

impl ModelConfig {
    /// Desk-scale default: 64px single-channel input, 8px patches, six blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            hidden_dim: 64,
            depth: 6,
            num_heads: 4,
            mlp_dim: 256,
            num_classes: 10,
            use_cls_token: true,
            merger: None,
            pooling: None,
        }
    }

    pub fn with_merger(mut self, merger: Option<MergerConfig>) -> Self {
        self.merger = merger;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_dim", self.mlp_dim),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.hidden_dim < 2 {
            return Err(Error::config("hidden_dim must be at least 2"));
        }
        if let Some(m) = &self.merger {
            m.validate(self.depth)?;
        }
        if self.pooling == Some(Pooling::Cls) && !self.cls_survives() {
            return Err(Error::config("cls pooling needs a cls token that bypasses the merger"));
        }
        Ok(())
    }

    /// Merger between the two halves of the network; needs an even depth.
    pub fn mid_merger(&self, output_tokens: usize) -> Result<MergerConfig> {
        if self.depth % 2 != 0 {
            return Err(Error::config(format!(
                "mid-network placement needs an even depth, got {}",
                self.depth
            )));
        }
        Ok(MergerConfig::new(self.depth / 2, output_tokens))
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn cls_tokens(&self) -> usize {
        usize::from(self.use_cls_token)
    }

    /// Tokens entering the first block.
    pub fn input_tokens(&self) -> usize {
        self.num_patches() + self.cls_tokens()
    }

    /// Tokens leaving the merger, counting a bypassing cls token.
    pub fn merged_tokens(&self) -> Option<usize> {
        self.merger
            .map(|m| m.output_tokens + usize::from(self.use_cls_token && m.preserve_cls))
    }

    /// Token count processed by each block, in order.
    pub fn tokens_per_block(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|l| match (&self.merger, self.merged_tokens()) {
                (Some(m), Some(t)) if l >= m.placement => t,
                _ => self.input_tokens(),
            })
            .collect()
    }

    fn cls_survives(&self) -> bool {
        self.use_cls_token && self.merger.is_none_or(|m| m.preserve_cls)
    }

    pub fn pooling(&self) -> Pooling {
        if let Some(p) = self.pooling {
            return p;
        }
        if self.cls_survives() {
            Pooling::Cls
        } else {
            Pooling::Mean
        }
    }
}
