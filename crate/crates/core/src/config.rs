//! Model hyperparameters shared by the encoder, fusion module, decoder, and
//! training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input images are square with this side length.
    pub image_size: usize,
    /// Side of the square patches tokenized by the embedding stage.
    pub patch_size: usize,
    /// Channel widths of the three encoder stages; each stage doubles the last.
    pub stage_channels: [usize; 3],
    /// Transformer blocks per encoder stage.
    pub depths: [usize; 3],
    /// Attention heads per stage; must divide the stage width.
    pub heads: [usize; 3],
    /// Hidden expansion factor of every block's MLP.
    pub mlp_ratio: usize,
    /// Whether the cross-stage fusion branch is built at all.
    pub iscf_enabled: bool,
    /// Hidden width of the fusion gate's two-layer FFN.
    pub iscf_hidden: usize,
    /// Seed for weight init, data splitting, and shuffling.
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ModelConfig {
    /// Full-scale configuration.
    fn default() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            stage_channels: [128, 256, 512],
            depths: [2, 2, 6],
            heads: [2, 4, 8],
            mlp_ratio: 4,
            iscf_enabled: true,
            iscf_hidden: 8,
            seed: 0,
            lr: 1e-4,
            batch_size: 24,
            epochs: 100,
        }
    }
}

impl ModelConfig {
    /// Small configuration that exercises every code path in seconds.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 4,
            stage_channels: [16, 32, 64],
            depths: [1, 1, 1],
            heads: [2, 4, 8],
            mlp_ratio: 4,
            iscf_enabled: true,
            iscf_hidden: 8,
            seed: 0,
            lr: 6e-3,
            batch_size: 8,
            epochs: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return err("image_size and patch_size must be positive".into());
        }
        // Two 2x downsamples follow the patch embedding, so the token grid
        // must divide cleanly twice more.
        if self.image_size % (self.patch_size * 4) != 0 {
            return err(format!(
                "image_size {} must be a multiple of patch_size*4 = {}",
                self.image_size,
                self.patch_size * 4
            ));
        }
        let [c1, c2, c3] = self.stage_channels;
        if c2 != 2 * c1 || c3 != 2 * c2 {
            return err(format!("stage_channels {:?} must double at each stage", self.stage_channels));
        }
        if c1 % 4 != 0 || c1 == 0 {
            return err(format!("first stage width {c1} must be a positive multiple of 4"));
        }
        for s in 0..3 {
            if self.heads[s] == 0 || self.stage_channels[s] % self.heads[s] != 0 {
                return err(format!(
                    "heads[{s}] = {} must divide stage width {}",
                    self.heads[s], self.stage_channels[s]
                ));
            }
            if self.depths[s] == 0 {
                return err(format!("depths[{s}] must be at least 1"));
            }
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be at least 1".into());
        }
        if self.iscf_hidden == 0 {
            return err("iscf_hidden must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return err(format!("lr {} must be positive and finite", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// Side length of the token grid at a stage (0, 1, or 2).
    pub fn grid_side(&self, stage: usize) -> usize {
        self.image_size / self.patch_size / (1 << stage)
    }

    /// Token count at a stage.
    pub fn tokens(&self, stage: usize) -> usize {
        let s = self.grid_side(stage);
        s * s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn token_counts_follow_the_patch_grid() {
        let full = ModelConfig::default();
        assert_eq!(full.tokens(0), 3136);
        assert_eq!(full.tokens(1), 784);
        assert_eq!(full.tokens(2), 196);
        assert_eq!(full.grid_side(2), 14);

        let desk = ModelConfig::desk();
        assert_eq!(desk.tokens(0), 256);
        assert_eq!(desk.tokens(1), 64);
        assert_eq!(desk.tokens(2), 16);
    }

    #[test]
    fn validation_rejects_each_broken_field() {
        let base = ModelConfig::desk();

        let mut c = base.clone();
        c.image_size = 60;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.stage_channels = [16, 30, 64];
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.heads = [2, 4, 7];
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.depths = [1, 0, 1];
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.lr = 0.0;
        assert!(c.validate().is_err());

        let mut c = base;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
