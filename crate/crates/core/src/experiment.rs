//! End-to-end runs on the synthetic toy corpus: codec, prompt encoder,
//! gender classifier, transformer training and objective evaluation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::{train_codec, Codec, CodecConfig, CodecTrainReport};
use crate::error::Result;
use crate::features::{CorpusKind, PhonemeVocab};
use crate::metrics::{evaluate_batch, EvalConfig, EvalItem, EvalReport, GenderClassifier, SpectralGenderClassifier};
use crate::pipeline::{
    encoder_finetune_pairs, prepare_utterance, Annotation, synthesize, train_transformer, LabelConfig, PreparedUtterance,
    PromptCache, PromptSource, TrainReport, TrainSchedule,
};
use crate::prompt::{assemble_prompt, AttributeLabels, DropConfig, KeywordBank, TemplateBank};
use crate::prompt_encoder::{FinetuneConfig, FinetuneReport, PromptBackend, ToyEncoder, ToyEncoderConfig};
use crate::toy::{generate_corpus, generate_eval_set, ToyConfig, ToyEvalItem, ToyUtterance, REST, VOWELS};
use crate::transformer::{ModelConfig, MultiScaleTransformer, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub toy: ToyConfig,
    pub codec: CodecConfig,
    pub encoder: ToyEncoderConfig,
    pub finetune: FinetuneConfig,
    pub finetune_pairs: usize,
    pub gender_epochs: usize,
    pub labels: LabelConfig,
    pub drop: DropConfig,
    pub pooled_prompt: bool,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub seed: u64,
}

/// Model size that trains on one CPU core in minutes.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        hidden: 96,
        global_layers: 2,
        global_heads: 4,
        local_layers: 1,
        local_heads: 4,
        ff_width: 384,
        phonemes: VOWELS.len() + 2,
        max_pitch: 600,
        max_frames: 128,
        prompt_encoders: BTreeMap::from([(crate::prompt_encoder::TOY_BACKEND.to_string(), 32)]),
        ..ModelConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            // enough melodies that the model cannot memorize contours
            toy: ToyConfig {
                melodies: 2400,
                ..ToyConfig::default()
            },
            codec: CodecConfig::default(),
            encoder: ToyEncoderConfig::default(),
            finetune: FinetuneConfig::default(),
            finetune_pairs: 2000,
            gender_epochs: 300,
            labels: LabelConfig::default(),
            drop: DropConfig::default(),
            pooled_prompt: true,
            model: desk_model_config(),
            schedule: TrainSchedule {
                epochs: 8,
                ..TrainSchedule::default()
            },
            seed: 17,
        }
    }
}

pub fn toy_phoneme_vocab() -> PhonemeVocab {
    PhonemeVocab::from_symbols(VOWELS.iter().copied().chain([REST]))
}

/// Everything a transformer run needs, built once per toy corpus.
pub struct ToyWorld {
    pub config: ExperimentConfig,
    pub corpus: Vec<ToyUtterance>,
    pub eval_items: Vec<ToyEvalItem>,
    pub codec: Codec,
    pub codec_report: CodecTrainReport,
    pub encoder: ToyEncoder,
    pub encoder_report: FinetuneReport,
    pub classifier: SpectralGenderClassifier,
    pub vocab: PhonemeVocab,
    pub prepared: Vec<PreparedUtterance>,
    pub keywords: KeywordBank,
    pub train_templates: TemplateBank,
    pub eval_templates: TemplateBank,
}

impl ToyWorld {
    pub fn build(config: ExperimentConfig) -> Result<Self> {
        let corpus = generate_corpus(&config.toy)?;
        let eval_items = generate_eval_set(&config.toy)?;
        let waves: Vec<Waveform> = corpus.iter().map(|u| u.audio.clone()).collect();
        let (codec, codec_report) = train_codec(&waves, &config.codec, config.seed)?;

        let keywords = KeywordBank::builtin();
        let train_templates = TemplateBank::builtin();
        let eval_templates = TemplateBank::builtin_eval();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37);
        let train_pairs = encoder_finetune_pairs(config.finetune_pairs, &keywords, &train_templates, &mut rng)?;
        let heldout_pairs = encoder_finetune_pairs(config.finetune_pairs / 10, &keywords, &eval_templates, &mut rng)?;
        let mut encoder = ToyEncoder::with_keywords(config.encoder, &keywords);
        let encoder_report = encoder.finetune_multilabel(&train_pairs, &heldout_pairs, &config.finetune)?;

        let labelled: Vec<(Waveform, _)> = corpus.iter().map(|u| (u.audio.clone(), u.gender)).collect();
        let classifier = SpectralGenderClassifier::train(
            codec.config.analysis,
            codec.config.hop,
            &labelled,
            config.gender_epochs,
            config.seed,
        )?;

        let vocab = toy_phoneme_vocab();
        let prepared = corpus
            .iter()
            .map(|u| {
                let ann = Annotation {
                    id: &u.id,
                    kind: CorpusKind::Singing,
                    phonemes: &u.phonemes,
                    durations: &u.durations,
                    f0: u.f0.values(),
                    gender: Some(u.gender),
                };
                prepare_utterance(ann, &u.audio, None, &codec, &vocab, &config.labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            corpus,
            eval_items,
            codec,
            codec_report,
            encoder,
            encoder_report,
            classifier,
            vocab,
            prepared,
            keywords,
            train_templates,
            eval_templates,
        })
    }

    /// Trains a fresh transformer with `model` on the prepared corpus.
    pub fn train(&self, model: &ModelConfig, schedule: &TrainSchedule) -> Result<(MultiScaleTransformer, TrainReport)> {
        let mut m = MultiScaleTransformer::new(model.clone())?;
        let prompts = PromptSource {
            keywords: self.keywords.clone(),
            templates: self.train_templates.clone(),
            drop: self.config.drop,
        };
        let mut cache = PromptCache::new(&self.encoder as &dyn PromptBackend, self.config.pooled_prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x7a11);
        let report = train_transformer(&mut m, &self.prepared, None, &prompts, &mut cache, schedule, &mut rng)?;
        Ok((m, report))
    }

    /// Evaluation prompts: item `i` uses the coverage of held-out template
    /// `i mod n`, filled with the item's intended labels.
    pub fn eval_prompts(&self) -> Result<Vec<(String, AttributeLabels)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xe7a1);
        let n = self.eval_templates.len();
        self.eval_items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let covers = &self.eval_templates.templates[i % n].covered_attributes;
                let mut labels = item.intended;
                for attr in crate::prompt::Attribute::ALL {
                    if !covers.contains(&attr) {
                        labels.clear(attr);
                    }
                }
                let s = assemble_prompt(&labels, &self.keywords, &self.eval_templates, &mut rng)?;
                Ok((s.sentence, labels))
            })
            .collect()
    }

    /// Synthesizes every evaluation item and scores the outputs.
    pub fn evaluate(&self, model: &MultiScaleTransformer, sampling: &SamplingConfig) -> Result<EvalReport> {
        let prompts = self.eval_prompts()?;
        let mut cache = PromptCache::new(&self.encoder as &dyn PromptBackend, self.config.pooled_prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5a3d);
        let mut items = Vec::with_capacity(self.eval_items.len());
        for (item, (sentence, intended)) in self.eval_items.iter().zip(prompts) {
            let prompt = cache.get(&sentence)?;
            let out = synthesize(
                model,
                &self.codec,
                &self.vocab,
                &prompt,
                &item.phonemes,
                &item.durations,
                &item.f0,
                sampling,
                &mut rng,
            )?;
            items.push(EvalItem {
                id: item.id.clone(),
                audio: out.audio,
                intended,
                reference_f0: Some(item.f0.clone()),
            });
        }
        let cfg = EvalConfig {
            volume_bands: self.config.labels.volume_bands,
            range_thresholds: self.config.labels.range_thresholds,
            analysis: self.codec.config.analysis,
            hop: self.codec.config.hop,
        };
        evaluate_batch(&items, Some(&self.classifier as &dyn GenderClassifier), &cfg)
    }
}
