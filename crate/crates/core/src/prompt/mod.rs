//! Attribute categorization and natural-language prompt assembly.
//!
//! Utterances are first categorized into gender / volume / vocal-range labels.
//! During training a label or two is randomly dropped and a prompt sentence is
//! assembled from a static template bank by substituting category keywords.

mod assemble;
mod bank;
mod labels;
mod volume;

pub use assemble::{assemble_prompt, drop_labels, PromptSample};
pub use bank::{CategoryBinding, KeywordBank, PromptTemplate, TemplateBank};
pub use labels::{
    categorize_range, categorize_volume, Attribute, AttributeLabels, Gender, RangeThresholds,
    VocalRange, Volume, VolumeBands,
};
pub use volume::rescale_volume_augment;

use serde::{Deserialize, Serialize};

/// Label-dropping probabilities used when fetching training prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropConfig {
    pub p1: f64,
    pub p2: f64,
}

impl Default for DropConfig {
    fn default() -> Self {
        Self { p1: 0.05, p2: 0.05 }
    }
}
