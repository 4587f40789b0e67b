use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap on visual tokens per image.
pub const MAX_ROIS_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Text-side positions, including `[CLS]` and the closing `[SEP]`.
    pub max_text_len: usize,
    pub max_rois: usize,
    pub roi_feature_dim: usize,
    pub segment_count: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 1000,
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn_dim: 256,
            max_text_len: 32,
            max_rois: MAX_ROIS_CAP,
            roi_feature_dim: 32,
            segment_count: 2,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_text_len", self.max_text_len),
            ("max_rois", self.max_rois),
            ("roi_feature_dim", self.roi_feature_dim),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.max_rois > MAX_ROIS_CAP {
            return Err(Error::Config(format!(
                "max_rois {} exceeds the cap of {MAX_ROIS_CAP}",
                self.max_rois
            )));
        }
        if self.segment_count != 2 {
            return Err(Error::Config("segment_count must be 2 (text, visual)".into()));
        }
        if self.vocab_size <= crate::data::vocab::FIRST_REGULAR_ID {
            return Err(Error::Config("vocab_size must leave room beyond special tokens".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}
