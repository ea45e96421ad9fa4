use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::bank::{KeywordBank, TemplateBank};
use super::labels::{Attribute, AttributeLabels};
use crate::error::{Error, Result};

/// An assembled prompt sentence and the labels it expresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSample {
    pub labels: AttributeLabels,
    pub sentence: String,
    pub template_id: String,
    pub keyword_choices: BTreeMap<Attribute, String>,
}

/// Drops one present label with probability `p1`, then independently a
/// further one with probability `p2`.
///
/// Dropping gender also drops vocal range. A drop that would leave no label
/// at all is reverted.
pub fn drop_labels<R: Rng + ?Sized>(
    labels: &AttributeLabels,
    p1: f64,
    p2: f64,
    rng: &mut R,
) -> AttributeLabels {
    let mut current = *labels;
    for p in [p1, p2] {
        if !rng.random_bool(p.clamp(0.0, 1.0)) {
            continue;
        }
        let present = current.present();
        let Some(&victim) = present.choose(rng) else {
            continue;
        };
        let before = current;
        current.clear(victim);
        if current.gender.is_none() {
            current.vocal_range = None;
        }
        if current.is_empty() {
            current = before;
        }
    }
    current
}

/// Fills a uniformly chosen matching template with uniformly chosen keywords.
pub fn assemble_prompt<R: Rng + ?Sized>(
    labels: &AttributeLabels,
    keywords: &KeywordBank,
    templates: &TemplateBank,
    rng: &mut R,
) -> Result<PromptSample> {
    labels.validate()?;
    let candidates: Vec<_> = templates.matching(labels).collect();
    let template = candidates.choose(rng).ok_or_else(|| {
        let combo: Vec<String> = labels
            .present()
            .iter()
            .map(|a| format!("{a}={}", labels.category(*a).unwrap_or("-")))
            .collect();
        Error::config(format!(
            "no prompt template covers attribute combination [{}]",
            combo.join(", ")
        ))
    })?;

    let mut sentence = template.text.clone();
    let mut keyword_choices = BTreeMap::new();
    for attr in template.placeholders() {
        let category = labels
            .category(attr)
            .expect("matching template only has placeholders for present labels");
        let word = keywords
            .keywords(attr, category)
            .choose(rng)
            .ok_or_else(|| Error::config(format!("no keywords for {attr}/{category}")))?;
        sentence = sentence.replace(attr.placeholder(), word);
        keyword_choices.insert(attr, word.clone());
    }
    Ok(PromptSample {
        labels: *labels,
        sentence,
        template_id: template.id.clone(),
        keyword_choices,
    })
}
