use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::labels::{Attribute, AttributeLabels};
use crate::error::{Error, Result};

const DEFAULT_KEYWORDS: &str = include_str!("../../../../assets/prompts/keywords.toml");
const DEFAULT_TEMPLATES: &str = include_str!("../../../../assets/prompts/templates.toml");
const DEFAULT_EVAL_TEMPLATES: &str = include_str!("../../../../assets/prompts/eval_templates.toml");

/// Keywords per (attribute, category).
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordBank {
    entries: BTreeMap<(Attribute, String), Vec<String>>,
}

#[derive(Deserialize)]
struct KeywordFile {
    #[allow(dead_code)]
    version: u32,
    gender: BTreeMap<String, Vec<String>>,
    volume: BTreeMap<String, Vec<String>>,
    range: BTreeMap<String, Vec<String>>,
}

impl KeywordBank {
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_KEYWORDS).expect("bundled keyword bank is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: KeywordFile =
            toml::from_str(text).map_err(|e| Error::config(format!("keyword bank: {e}")))?;
        let mut entries = BTreeMap::new();
        for (attr, map) in [
            (Attribute::Gender, file.gender),
            (Attribute::Volume, file.volume),
            (Attribute::Range, file.range),
        ] {
            for (cat, words) in map {
                entries.insert((attr, cat), words);
            }
        }
        let bank = Self { entries };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        for attr in Attribute::ALL {
            for cat in attr.categories() {
                match self.entries.get(&(attr, cat.to_string())) {
                    Some(list) if !list.is_empty() => {}
                    _ => {
                        return Err(Error::config(format!(
                            "keyword bank has no keywords for {attr}/{cat}"
                        )))
                    }
                }
            }
        }
        for (attr, cat) in self.entries.keys() {
            if !attr.categories().contains(&cat.as_str()) {
                return Err(Error::config(format!("keyword bank has unknown category {attr}/{cat}")));
            }
        }
        Ok(())
    }

    pub fn keywords(&self, attr: Attribute, category: &str) -> &[String] {
        self.entries
            .get(&(attr, category.to_string()))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Every keyword with the (attribute, category) it belongs to.
    pub fn lexicon(&self) -> impl Iterator<Item = (Attribute, &str, &str)> {
        self.entries
            .iter()
            .flat_map(|((a, c), words)| words.iter().map(move |w| (*a, c.as_str(), w.as_str())))
    }
}

/// Binds a placeholder-free template to one category of an attribute.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct CategoryBinding {
    pub attribute: Attribute,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
    #[serde(rename = "covers")]
    pub covered_attributes: BTreeSet<Attribute>,
    #[serde(default, rename = "category")]
    pub category_specific: Option<CategoryBinding>,
}

impl PromptTemplate {
    pub fn placeholders(&self) -> BTreeSet<Attribute> {
        Attribute::ALL
            .into_iter()
            .filter(|a| self.text.contains(a.placeholder()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.covered_attributes.len();
        if !(1..=3).contains(&n) {
            return Err(Error::config(format!("template {} covers {n} attributes", self.id)));
        }
        let mut expected = self.covered_attributes.clone();
        if let Some(binding) = &self.category_specific {
            if !binding.attribute.categories().contains(&binding.name.as_str()) {
                return Err(Error::config(format!(
                    "template {} binds unknown category {}/{}",
                    self.id, binding.attribute, binding.name
                )));
            }
            if !expected.remove(&binding.attribute) {
                return Err(Error::config(format!(
                    "template {} binds {} which it does not cover",
                    self.id, binding.attribute
                )));
            }
        }
        if self.placeholders() != expected {
            return Err(Error::config(format!(
                "template {} placeholders {:?} do not match covered attributes {:?}",
                self.id,
                self.placeholders(),
                expected
            )));
        }
        if self.text.replace("[gender]", "").replace("[volume]", "").replace("[pitch]", "").contains(['[', ']']) {
            return Err(Error::config(format!("template {} has an unknown placeholder", self.id)));
        }
        Ok(())
    }

    /// True when this template can render `labels` exactly.
    pub fn matches(&self, labels: &AttributeLabels) -> bool {
        let present: BTreeSet<Attribute> = labels.present().into_iter().collect();
        if present != self.covered_attributes {
            return false;
        }
        match &self.category_specific {
            Some(b) => labels.category(b.attribute) == Some(b.name.as_str()),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub templates: Vec<PromptTemplate>,
}

#[derive(Deserialize)]
struct TemplateFile {
    #[allow(dead_code)]
    version: u32,
    template: Vec<PromptTemplate>,
}

impl TemplateBank {
    /// Training template pool.
    pub fn builtin() -> Self {
        Self::from_toml(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    /// Held-out evaluation templates; never used for training.
    pub fn builtin_eval() -> Self {
        Self::from_toml(DEFAULT_EVAL_TEMPLATES).expect("bundled eval templates are valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: TemplateFile =
            toml::from_str(text).map_err(|e| Error::config(format!("template bank: {e}")))?;
        let mut seen = BTreeSet::new();
        for t in &file.template {
            t.validate()?;
            if !seen.insert(t.id.clone()) {
                return Err(Error::config(format!("duplicate template id {}", t.id)));
            }
        }
        Ok(Self {
            templates: file.template,
        })
    }

    pub fn matching<'a>(&'a self, labels: &'a AttributeLabels) -> impl Iterator<Item = &'a PromptTemplate> + 'a {
        self.templates.iter().filter(move |t| t.matches(labels))
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}
