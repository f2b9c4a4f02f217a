//! Two-stage transformer renderer.
//!
//! The view-independent stage runs self-attention over triangle and register
//! tokens in world space. The view-dependent stage turns 8x8 ray bundles
//! into queries that cross-attend to those tokens in camera space, and a
//! small dense decoder fuses the last few layers into a full-resolution
//! log-radiance image.

mod forward;
mod weights;

pub use forward::{
    attention_maps, dpt_decode, forward, render, render_log, view_dependent_forward,
    view_independent_forward, AttentionMap, ForwardOutput, Params, ViewDependentOutput,
};
pub use weights::ModelWeights;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{SceneError, PATCH};
use crate::tensor::TensorError;
use crate::tokenizer::{
    normal_features, TokenizerError, ANCHOR_DIMS, DEFAULT_FREQUENCIES, DEFAULT_REGISTERS,
};

/// Number of decoder resolution levels: 1/8, 1/4, 1/2 and full.
pub const DPT_LEVELS: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("weights do not match config: {0}")]
    Weights(String),
    #[error("bundle index {index} out of range ({count} bundles)")]
    BundleIndex { index: usize, count: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vi_layers: usize,
    pub vd_layers: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_ratio: usize,
    pub registers: usize,
    pub patch: usize,
    /// How many of the last view-dependent layers feed the decoder.
    pub dpt_taps: usize,
    pub dpt_channels: usize,
    pub frequencies: Vec<f64>,
    /// Rotary pairs per head; lower frequencies are kept first when this is
    /// below `9 * frequencies.len()`.
    pub rope_pairs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::large()
    }
}

impl ModelConfig {
    /// Full-size configuration: 768 wide, 6 heads of 128, 12 + 6 layers.
    pub fn large() -> Self {
        ModelConfig {
            d_model: 768,
            n_heads: 6,
            head_dim: 128,
            vi_layers: 12,
            vd_layers: 6,
            ffn_ratio: 4,
            registers: DEFAULT_REGISTERS,
            patch: PATCH as usize,
            dpt_taps: 4,
            dpt_channels: 32,
            frequencies: DEFAULT_FREQUENCIES.to_vec(),
            rope_pairs: 54,
        }
    }

    /// CPU-sized configuration: 128 wide, 4 heads of 32, 4 + 2 layers.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            vi_layers: 4,
            vd_layers: 2,
            ffn_ratio: 4,
            registers: DEFAULT_REGISTERS,
            patch: PATCH as usize,
            dpt_taps: 2,
            dpt_channels: 16,
            frequencies: DEFAULT_FREQUENCIES.to_vec(),
            rope_pairs: 12,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "large" => Some(Self::large()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_ratio * self.d_model
    }

    /// Decoder level of tap `j` (oldest first); level 3 is full resolution.
    pub fn tap_level(&self, j: usize) -> usize {
        DPT_LEVELS - self.dpt_taps + j
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.head_dim == 0 {
            return fail("d_model, n_heads and head_dim must be positive".into());
        }
        if self.n_heads * self.head_dim != self.d_model {
            return fail(format!(
                "n_heads ({}) x head_dim ({}) != d_model ({})",
                self.n_heads, self.head_dim, self.d_model
            ));
        }
        if self.vi_layers == 0 || self.vd_layers == 0 {
            return fail("vi_layers and vd_layers must be positive".into());
        }
        if self.dpt_taps == 0 || self.dpt_taps > self.vd_layers || self.dpt_taps > DPT_LEVELS {
            return fail(format!(
                "dpt_taps ({}) must be in 1..={}",
                self.dpt_taps,
                self.vd_layers.min(DPT_LEVELS)
            ));
        }
        if self.patch != PATCH as usize {
            return fail(format!("patch must be {PATCH}"));
        }
        if self.ffn_ratio == 0 || self.dpt_channels == 0 {
            return fail("ffn_ratio and dpt_channels must be positive".into());
        }
        if self.frequencies.is_empty() || !self.frequencies.iter().all(|f| f.is_finite()) {
            return fail("frequencies must be a nonempty list of finite values".into());
        }
        if self.rope_pairs > ANCHOR_DIMS * self.frequencies.len() {
            return fail(format!(
                "rope_pairs ({}) exceeds {} available pairs",
                self.rope_pairs,
                ANCHOR_DIMS * self.frequencies.len()
            ));
        }
        if 2 * self.rope_pairs > self.head_dim {
            return fail(format!(
                "head_dim {} too small for {} rotary pairs",
                self.head_dim, self.rope_pairs
            ));
        }
        Ok(())
    }

    /// Name of the first field whose value differs from `other`.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        let checks: [(&'static str, bool); 12] = [
            ("d_model", self.d_model == other.d_model),
            ("n_heads", self.n_heads == other.n_heads),
            ("head_dim", self.head_dim == other.head_dim),
            ("vi_layers", self.vi_layers == other.vi_layers),
            ("vd_layers", self.vd_layers == other.vd_layers),
            ("ffn_ratio", self.ffn_ratio == other.ffn_ratio),
            ("registers", self.registers == other.registers),
            ("patch", self.patch == other.patch),
            ("dpt_taps", self.dpt_taps == other.dpt_taps),
            ("dpt_channels", self.dpt_channels == other.dpt_channels),
            ("frequencies", self.frequencies == other.frequencies),
            ("rope_pairs", self.rope_pairs == other.rope_pairs),
        ];
        checks
            .into_iter()
            .find(|(_, same)| !same)
            .map(|(name, _)| name)
    }

    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let hd = self.head_dim;
        let h = self.ffn_hidden();
        let c = self.dpt_channels;
        let embed =
            (normal_features(self.frequencies.len()) + 2) * d + (10 + 2) * d + (192 + 2) * d;
        let registers = self.registers * d;
        let attn = 4 * d * d + 2 * hd;
        let ffn = 3 * d * h;
        let vi = self.vi_layers * (2 * d + attn + ffn) + d;
        let vd = self.vd_layers * (4 * d + 2 * attn + ffn);
        let mut dpt = 3 * c * 9 + 3;
        for j in 0..self.dpt_taps {
            let s2 = 1usize << (2 * self.tap_level(j));
            dpt += d + d * s2 * c + s2 * c + c * c * 9 + c;
        }
        embed + registers + vi + vd + dpt
    }
}

#[cfg(test)]
mod tests;
