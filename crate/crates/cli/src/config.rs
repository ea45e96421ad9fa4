//! Layered run configuration: built-in defaults, then a TOML file, then
//! `--set key.path=value` overrides, then dedicated flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use svs_core::codec::CodecConfig;
use svs_core::features::DataMix;
use svs_core::pipeline::{LabelConfig, TrainSchedule};
use svs_core::prompt::DropConfig;
use svs_core::prompt_encoder::{FinetuneConfig, ToyEncoderConfig};
use svs_core::transformer::{ModelConfig, SamplingConfig};
use svs_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Where every command reads and writes its artifacts.
    pub run_dir: PathBuf,
    pub singing_manifest: Option<PathBuf>,
    pub speech_manifest: Option<PathBuf>,
    /// Overrides for the bundled prompt assets.
    pub keywords: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub eval_templates: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            singing_manifest: None,
            speech_manifest: None,
            keywords: None,
            templates: None,
            eval_templates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSettings {
    pub drop: DropConfig,
    pub labels: LabelConfig,
    /// Mean-pool prompt token vectors into a single frame.
    pub pooled: bool,
    pub encoder: ToyEncoderConfig,
    pub finetune: FinetuneConfig,
    /// Prompt/label pairs generated for encoder fine-tuning.
    pub finetune_pairs: usize,
}

impl Default for PromptSettings {
    fn default() -> Self {
        Self {
            drop: DropConfig::default(),
            labels: LabelConfig::default(),
            pooled: false,
            encoder: ToyEncoderConfig::default(),
            finetune: FinetuneConfig::default(),
            finetune_pairs: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Gradient steps for the spectral gender classifier.
    pub gender_epochs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { gender_epochs: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required by every command that trains or samples.
    pub seed: Option<u64>,
    pub paths: Paths,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub prompt: PromptSettings,
    pub sampling: SamplingConfig,
    pub train: TrainSchedule,
    pub data_mix: DataMix,
    pub eval: EvalSettings,
}

impl RunConfig {
    /// Applies a config file and dotted overrides on top of the defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: toml::Value = text
                .parse::<toml::Table>()
                .map(toml::Value::Table)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge(&mut value, layer);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
            set_path(&mut value, key.trim(), parse_scalar(raw.trim()))?;
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("resolved config: {}", e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::config("a seed is required for this command (set `seed` or pass --seed)"))
    }

    /// Checks that every configured input path exists.
    pub fn check_paths(&self) -> Result<()> {
        let p = &self.paths;
        for (name, path) in [
            ("paths.singing_manifest", &p.singing_manifest),
            ("paths.speech_manifest", &p.speech_manifest),
            ("paths.keywords", &p.keywords),
            ("paths.templates", &p.templates),
            ("paths.eval_templates", &p.eval_templates),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::config(format!("{name} = {} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, layer: toml::Value) {
    match (base, layer) {
        (toml::Value::Table(b), toml::Value::Table(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config("empty override key"))?;
    let mut node = root;
    for p in parts {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key}: {p} is not a table")))?;
        node = table.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::config(format!("override {key}: parent is not a table")))?
        .insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.toml");
        std::fs::write(&file, "seed = 3\n[model]\nhidden = 96\nglobal_layers = 2\n").unwrap();
        let cfg = RunConfig::resolve(Some(&file), &["model.hidden=48".into(), "paths.run_dir=out/x".into()]).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.model.hidden, 48);
        assert_eq!(cfg.model.global_layers, 2);
        assert_eq!(cfg.paths.run_dir, PathBuf::from("out/x"));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::resolve(None, &["model.hiden=3".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::resolve(None, &["nonsense".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seed_is_required_when_asked() {
        assert!(RunConfig::default().require_seed().is_err());
    }

    #[test]
    fn bundled_configs_resolve() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut files = vec![root.join("toy.toml")];
        let mut mixes: Vec<PathBuf> = std::fs::read_dir(root.join("data_mix"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        mixes.sort();
        assert_eq!(mixes.len(), 6);
        files.extend(mixes);
        for f in &files {
            let cfg = RunConfig::resolve(Some(f), &[]).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
            cfg.model.validate().unwrap();
            assert!(cfg.seed.is_some(), "{}", f.display());
        }
        let ten_min = RunConfig::resolve(Some(&root.join("data_mix/3_10min_singing.toml")), &[]).unwrap();
        assert!((ten_min.data_mix.singing_hours.unwrap() * 60.0 - 10.0).abs() < 1e-3);
    }
}
