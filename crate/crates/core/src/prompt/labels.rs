use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Volume,
    Range,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Volume, Attribute::Range];

    /// Placeholder token used in template text.
    pub fn placeholder(self) -> &'static str {
        match self {
            Attribute::Gender => "[gender]",
            Attribute::Volume => "[volume]",
            Attribute::Range => "[pitch]",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Volume => "volume",
            Attribute::Range => "range",
        }
    }

    /// Category names, in the order used by classifier heads.
    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Attribute::Gender => &["male", "female"],
            Attribute::Volume => &["low", "medium", "high"],
            Attribute::Range => &["low", "high"],
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Volume {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocalRange {
    Low,
    High,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn name(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl Volume {
    pub const ALL: [Volume; 3] = [Volume::Low, Volume::Medium, Volume::High];

    pub fn name(self) -> &'static str {
        match self {
            Volume::Low => "low",
            Volume::Medium => "medium",
            Volume::High => "high",
        }
    }
}

impl VocalRange {
    pub const ALL: [VocalRange; 2] = [VocalRange::Low, VocalRange::High];

    pub fn name(self) -> &'static str {
        match self {
            VocalRange::Low => "low",
            VocalRange::High => "high",
        }
    }
}

impl FromStr for Gender {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "male" => Ok(Gender::Male),
            "female" => Ok(Gender::Female),
            _ => Err(Error::invalid(format!("unknown gender category '{s}'"))),
        }
    }
}

impl FromStr for Volume {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Volume::Low),
            "medium" => Ok(Volume::Medium),
            "high" => Ok(Volume::High),
            _ => Err(Error::invalid(format!("unknown volume category '{s}'"))),
        }
    }
}

impl FromStr for VocalRange {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(VocalRange::Low),
            "high" => Ok(VocalRange::High),
            _ => Err(Error::invalid(format!("unknown vocal range category '{s}'"))),
        }
    }
}

/// Style labels of one utterance; `None` means the attribute is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AttributeLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume: Option<Volume>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocal_range: Option<VocalRange>,
}

impl AttributeLabels {
    pub fn new(
        gender: Option<Gender>,
        volume: Option<Volume>,
        vocal_range: Option<VocalRange>,
    ) -> Result<Self> {
        let labels = Self {
            gender,
            volume,
            vocal_range,
        };
        labels.validate()?;
        Ok(labels)
    }

    /// Vocal range is only meaningful relative to a gender.
    pub fn validate(&self) -> Result<()> {
        if self.vocal_range.is_some() && self.gender.is_none() {
            return Err(Error::invalid("vocal range label requires a gender label"));
        }
        Ok(())
    }

    pub fn is_present(&self, attr: Attribute) -> bool {
        match attr {
            Attribute::Gender => self.gender.is_some(),
            Attribute::Volume => self.volume.is_some(),
            Attribute::Range => self.vocal_range.is_some(),
        }
    }

    pub fn present(&self) -> Vec<Attribute> {
        Attribute::ALL
            .into_iter()
            .filter(|a| self.is_present(*a))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.present().is_empty()
    }

    pub fn clear(&mut self, attr: Attribute) {
        match attr {
            Attribute::Gender => self.gender = None,
            Attribute::Volume => self.volume = None,
            Attribute::Range => self.vocal_range = None,
        }
    }

    /// Category name of a present attribute.
    pub fn category(&self, attr: Attribute) -> Option<&'static str> {
        match attr {
            Attribute::Gender => self.gender.map(Gender::name),
            Attribute::Volume => self.volume.map(Volume::name),
            Attribute::Range => self.vocal_range.map(VocalRange::name),
        }
    }

    /// Multi-hot vector over all categories (gender, volume, range order).
    pub fn multi_hot(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(7);
        for attr in Attribute::ALL {
            let cat = self.category(attr);
            for name in attr.categories() {
                out.push(if cat == Some(*name) { 1.0 } else { 0.0 });
            }
        }
        out
    }

    /// Inverse of [`Self::multi_hot`] on scores: each attribute takes its
    /// best-scoring category when that score exceeds `threshold`.
    pub fn from_scores(scores: &[f32], threshold: f32) -> Self {
        let mut labels = AttributeLabels::default();
        let mut offset = 0;
        for attr in Attribute::ALL {
            let cats = attr.categories();
            let slice = &scores[offset..offset + cats.len()];
            offset += cats.len();
            let (best, score) = slice
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
            if score > threshold {
                let name = cats[best];
                match attr {
                    Attribute::Gender => labels.gender = name.parse().ok(),
                    Attribute::Volume => labels.volume = name.parse().ok(),
                    Attribute::Range => labels.vocal_range = name.parse().ok(),
                }
            }
        }
        labels
    }
}

impl fmt::Display for AttributeLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Attribute::ALL
            .iter()
            .map(|a| format!("{}={}", a.name(), self.category(*a).unwrap_or("-")))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Closed RMS bands for the three volume categories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeBands {
    pub low: [f64; 2],
    pub medium: [f64; 2],
    pub high: [f64; 2],
}

impl Default for VolumeBands {
    fn default() -> Self {
        Self {
            low: [0.02, 0.04],
            medium: [0.07, 0.10],
            high: [0.16, 0.20],
        }
    }
}

impl VolumeBands {
    pub fn band(&self, volume: Volume) -> [f64; 2] {
        match volume {
            Volume::Low => self.low,
            Volume::Medium => self.medium,
            Volume::High => self.high,
        }
    }
}

/// Per-gender average-F0 threshold separating low and high vocal range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeThresholds {
    pub male_hz: f64,
    pub female_hz: f64,
}

impl Default for RangeThresholds {
    fn default() -> Self {
        Self {
            male_hz: 125.0,
            female_hz: 305.0,
        }
    }
}

impl RangeThresholds {
    pub fn for_gender(&self, gender: Gender) -> f64 {
        match gender {
            Gender::Male => self.male_hz,
            Gender::Female => self.female_hz,
        }
    }
}

/// Maps an utterance RMS to a volume category. Values between bands carry no
/// volume label.
pub fn categorize_volume(rms: f64, bands: &VolumeBands) -> Result<Option<Volume>> {
    if !(rms >= 0.0) {
        return Err(Error::invalid(format!("rms must be >= 0, got {rms}")));
    }
    Ok(Volume::ALL.into_iter().find(|v| {
        let [lo, hi] = bands.band(*v);
        rms >= lo && rms <= hi
    }))
}

/// Maps an average voiced F0 to a vocal-range category. Values exactly on the
/// threshold are `Low`.
pub fn categorize_range(
    avg_f0: f64,
    gender: Option<Gender>,
    thresholds: &RangeThresholds,
) -> Result<VocalRange> {
    let gender =
        gender.ok_or_else(|| Error::invalid("vocal range is undefined without a gender"))?;
    if !(avg_f0 > 0.0) {
        return Err(Error::invalid(format!("average f0 must be positive, got {avg_f0}")));
    }
    Ok(if avg_f0 <= thresholds.for_gender(gender) {
        VocalRange::Low
    } else {
        VocalRange::High
    })
}
