//! Multi-scale decoder-only transformer.
//!
//! A global transformer runs causally over frames; each frame's input is the
//! concatenation of its `n_q` token embeddings. The hidden state of frame
//! `t` is split into `n_q` chunks that condition a small local transformer,
//! which predicts the `n_q` tokens of frame `t + 1` left to right.

mod checkpoint;
mod layout;
mod model;
pub mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::RngState;
pub use layout::{build_sequence, LayoutSpans, Segment, SegmentKind, TokenLayoutSequence};
pub use model::{Generation, MultiScaleTransformer};
pub use vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub global_layers: usize,
    pub global_heads: usize,
    pub local_layers: usize,
    pub local_heads: usize,
    pub ff_width: usize,
    pub n_q: usize,
    pub codebook_size: usize,
    pub phonemes: usize,
    pub max_pitch: u32,
    pub max_frames: usize,
    /// Prompt backend name to its output width; one projection each.
    pub prompt_encoders: BTreeMap<String, usize>,
    pub use_range_factor: bool,
    pub rescale_melody: bool,
    /// Sinusoid pairs of log-pitch added to pitch-token embeddings.
    pub pitch_features: usize,
    /// Restart frame positions after every separator so acoustic frame `t`
    /// and melody frame `t` share a position; otherwise positions are
    /// absolute.
    pub segment_positions: bool,
    /// Rotate queries and keys by frame position instead of adding a
    /// position table to the global transformer input.
    pub rotary: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 192,
            global_layers: 4,
            global_heads: 4,
            local_layers: 2,
            local_heads: 4,
            ff_width: 768,
            n_q: 3,
            codebook_size: 64,
            phonemes: 64,
            max_pitch: 1200,
            max_frames: 1024,
            prompt_encoders: BTreeMap::from([(crate::prompt_encoder::TOY_BACKEND.to_string(), 32)]),
            use_range_factor: true,
            rescale_melody: true,
            pitch_features: 8,
            segment_positions: true,
            rotary: false,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            phonemes: self.phonemes,
            max_pitch: self.max_pitch,
            n_q: self.n_q,
            codebook_size: self.codebook_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden;
        if d == 0 || self.n_q == 0 || d % self.n_q != 0 {
            return Err(Error::config(format!("hidden width {d} must be a positive multiple of n_q {}", self.n_q)));
        }
        for (what, h) in [("global", self.global_heads), ("local", self.local_heads)] {
            if h == 0 || d % h != 0 {
                return Err(Error::config(format!("hidden width {d} not divisible by {what} heads {h}")));
            }
        }
        if self.rotary && (d / self.global_heads) % 2 != 0 {
            return Err(Error::config(format!(
                "rotary positions need an even head width, got {}",
                d / self.global_heads
            )));
        }
        if self.codebook_size < 1 || self.max_pitch < 1 || self.max_frames < 1 {
            return Err(Error::config("codebook size, max pitch and max frames must be positive"));
        }
        if self.prompt_encoders.is_empty() {
            return Err(Error::config("at least one prompt encoder projection is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Argmax for acoustic tokens.
    pub greedy: bool,
    pub temperature: f64,
    /// 0 keeps the whole support.
    pub top_k: usize,
    pub greedy_range_factor: bool,
    /// Keeps the end token in the support; sampling it is a decoding error.
    pub allow_eos: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            greedy: false,
            temperature: 0.8,
            top_k: 16,
            greedy_range_factor: true,
            allow_eos: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig {
            rotary: true,
            ..ModelConfig::default()
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn odd_rotary_head_width_is_rejected() {
        let c = ModelConfig {
            hidden: 18,
            n_q: 3,
            global_heads: 6,
            local_heads: 3,
            rotary: true,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
