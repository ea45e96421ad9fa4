//! Glue between the corpus, codec, prompt pipeline and transformer:
//! labelling and tokenizing utterances, the training loop, and synthesis.

use std::collections::HashMap;
use std::rc::Rc;

use candle_nn::Optimizer;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::codec::{AcousticUnitSequence, Codec};
use crate::error::{Error, Result};
use crate::features::{read_f0_sidecar, regulate, CorpusKind, MixSampler, PhonemeVocab, UtteranceRecord};
use crate::pitch::{decompose_f0, voiced_mean, F0Sequence, MELODY_MEAN_HZ};
use crate::prompt::{
    assemble_prompt, categorize_range, categorize_volume, drop_labels, AttributeLabels, DropConfig, Gender,
    KeywordBank, RangeThresholds, TemplateBank, VolumeBands,
};
use crate::prompt_encoder::{encode_prompt, PromptBackend, PromptEmbedding};
use crate::transformer::{build_sequence, Generation, MultiScaleTransformer, SamplingConfig, TokenLayoutSequence};

/// Category boundaries used to label training audio.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub volume_bands: VolumeBands,
    pub range_thresholds: RangeThresholds,
}

/// Labels from the audio RMS, the voiced mean of `f0` and the annotated
/// gender. Utterances between volume bands carry no volume label.
pub fn label_utterance(
    audio: &Waveform,
    f0: &F0Sequence,
    gender: Option<Gender>,
    cfg: &LabelConfig,
) -> Result<AttributeLabels> {
    let volume = categorize_volume(audio.rms(), &cfg.volume_bands)?;
    let vocal_range = match (gender, voiced_mean(f0)) {
        (Some(g), Ok(mean)) => Some(categorize_range(mean, Some(g), &cfg.range_thresholds)?),
        _ => None,
    };
    Ok(AttributeLabels {
        gender,
        volume,
        vocal_range,
    })
}

/// An utterance ready to be laid out for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedUtterance {
    pub id: String,
    pub kind: CorpusKind,
    pub phoneme_ids: Vec<u32>,
    pub f0: F0Sequence,
    pub labels: AttributeLabels,
    pub units: AcousticUnitSequence,
}

/// Pads with zeros or truncates to `n` frames.
pub fn fit_f0(f0: &[f64], n: usize) -> F0Sequence {
    let mut v = f0.to_vec();
    v.resize(n, 0.0);
    F0Sequence(v)
}

/// Annotation of one utterance as read from a manifest.
#[derive(Debug, Clone, Copy)]
pub struct Annotation<'a> {
    pub id: &'a str,
    pub kind: CorpusKind,
    pub phonemes: &'a [String],
    pub durations: &'a [f64],
    pub f0: &'a [f64],
    pub gender: Option<Gender>,
}

/// Encodes `audio` (unless `units` are supplied) and aligns phonemes and
/// F0 to the unit frame count.
pub fn prepare_utterance(
    ann: Annotation<'_>,
    audio: &Waveform,
    units: Option<AcousticUnitSequence>,
    codec: &Codec,
    vocab: &PhonemeVocab,
    labels: &LabelConfig,
) -> Result<PreparedUtterance> {
    let units = match units {
        Some(u) => u,
        None => codec.encode(audio)?,
    };
    let frames = units.len();
    let frame_rate = codec.config.sample_rate as f64 / codec.config.hop as f64;
    let mut reg = regulate(ann.phonemes, ann.durations, frame_rate, vocab)?;
    reg.fit_to(frames);
    let f0 = fit_f0(ann.f0, frames);
    let labels = label_utterance(audio, &f0, ann.gender, labels)?;
    Ok(PreparedUtterance {
        id: ann.id.to_string(),
        kind: ann.kind,
        phoneme_ids: reg.phoneme_ids,
        f0,
        labels,
        units,
    })
}

pub fn prepare_record(
    rec: &UtteranceRecord,
    units: Option<AcousticUnitSequence>,
    codec: &Codec,
    vocab: &PhonemeVocab,
    labels: &LabelConfig,
) -> Result<PreparedUtterance> {
    let audio = Waveform::read_wav(&rec.audio)?;
    let f0 = read_f0_sidecar(&rec.f0)?;
    let ann = Annotation {
        id: &rec.id,
        kind: rec.kind(),
        phonemes: &rec.phonemes,
        durations: &rec.durations,
        f0: &f0,
        gender: rec.gender,
    };
    prepare_utterance(ann, &audio, units, codec, vocab, labels)
}

/// Encodes each distinct sentence once.
pub struct PromptCache<'a> {
    backend: &'a dyn PromptBackend,
    pooled: bool,
    cache: HashMap<String, Rc<PromptEmbedding>>,
}

impl<'a> PromptCache<'a> {
    pub fn new(backend: &'a dyn PromptBackend, pooled: bool) -> Self {
        Self {
            backend,
            pooled,
            cache: HashMap::new(),
        }
    }

    pub fn get(&mut self, sentence: &str) -> Result<Rc<PromptEmbedding>> {
        if let Some(e) = self.cache.get(sentence) {
            return Ok(e.clone());
        }
        let e = Rc::new(encode_prompt(sentence, self.backend, self.pooled)?);
        self.cache.insert(sentence.to_string(), e.clone());
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

/// Where training prompts come from.
#[derive(Debug, Clone)]
pub struct PromptSource {
    pub keywords: KeywordBank,
    pub templates: TemplateBank,
    pub drop: DropConfig,
}

impl PromptSource {
    /// Drops labels and assembles a sentence. `None` when the utterance has
    /// no labels at all.
    pub fn sample<R: Rng + ?Sized>(&self, labels: &AttributeLabels, rng: &mut R) -> Result<Option<String>> {
        if labels.is_empty() {
            return Ok(None);
        }
        let kept = drop_labels(labels, self.drop.p1, self.drop.p2, rng);
        Ok(Some(assemble_prompt(&kept, &self.keywords, &self.templates, rng)?.sentence))
    }
}

/// Range-factor token for this model, if it uses one.
fn range_token(model: &MultiScaleTransformer, f0: &F0Sequence) -> Result<Option<u32>> {
    if !model.config.use_range_factor {
        return Ok(None);
    }
    let rf = decompose_f0(f0, MELODY_MEAN_HZ)?.range_factor;
    if rf == 0 || rf > model.config.max_pitch {
        return Err(Error::data(format!(
            "range factor {rf} Hz is outside 1..={}",
            model.config.max_pitch
        )));
    }
    Ok(Some(rf))
}

pub fn training_layout(
    model: &MultiScaleTransformer,
    item: &PreparedUtterance,
    prompt: &PromptEmbedding,
) -> Result<TokenLayoutSequence> {
    let melody = model.melody_tokens(&item.f0)?;
    let rf = range_token(model, &item.f0)?;
    build_sequence(prompt, &item.phoneme_ids, &melody, rf, Some(&item.units), &model.vocab)
}

pub fn inference_prefix(
    model: &MultiScaleTransformer,
    prompt: &PromptEmbedding,
    phoneme_ids: &[u32],
    f0: &F0Sequence,
) -> Result<TokenLayoutSequence> {
    let melody = model.melody_tokens(f0)?;
    build_sequence(prompt, phoneme_ids, &melody, None, None, &model.vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warm-up steps before the constant rate.
    pub warmup_steps: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            warmup_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub epoch_losses: Vec<f32>,
    pub skipped_unlabelled: usize,
}

/// Trains on `items`. With a sampler, each epoch draws as many items as the
/// pool holds from the singing/speech mix; otherwise every item is visited
/// once per epoch in shuffled order.
pub fn train_transformer<R: Rng + ?Sized>(
    model: &mut MultiScaleTransformer,
    items: &[PreparedUtterance],
    sampler: Option<&MixSampler>,
    prompts: &PromptSource,
    cache: &mut PromptCache<'_>,
    schedule: &TrainSchedule,
    rng: &mut R,
) -> Result<TrainReport> {
    if schedule.batch_size == 0 || !(schedule.lr > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }
    let usable: Vec<usize> = (0..items.len()).filter(|&i| !items[i].labels.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::data("no labelled utterances to train on"));
    }
    let skipped_unlabelled = items.len() - usable.len();
    let mut opt = model.optimizer(schedule.lr)?;
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    let mut order = usable.clone();
    let mut step = 0usize;
    for epoch in 0..schedule.epochs {
        match sampler {
            Some(s) => {
                order.clear();
                while order.len() < usable.len() {
                    let i = s.sample(rng).ok_or_else(|| Error::data("data mix selected no utterances"))?;
                    if !items[i].labels.is_empty() {
                        order.push(i);
                    }
                }
            }
            None => order.shuffle(rng),
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(schedule.batch_size) {
            let mut layouts = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let sentence = prompts.sample(&items[i].labels, rng)?.expect("labelled");
                let prompt = cache.get(&sentence)?;
                layouts.push(training_layout(model, &items[i], &prompt)?);
            }
            let refs: Vec<&TokenLayoutSequence> = layouts.iter().collect();
            let warm = ((step + 1) as f64 / schedule.warmup_steps.max(1) as f64).min(1.0);
            opt.set_learning_rate(schedule.lr * warm);
            total += model.train_step(&refs, &mut opt)?;
            batches += 1;
            step += 1;
        }
        let mean = total / batches.max(1) as f32;
        tracing::info!(epoch, loss = mean, "epoch done");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        steps: model.steps(),
        epoch_losses,
        skipped_unlabelled,
    })
}

/// Result of synthesizing one request.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub audio: Waveform,
    pub generation: Generation,
}

/// Lyrics with durations and an input F0 contour; the contour length sets
/// the number of output frames.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<R: Rng + ?Sized>(
    model: &MultiScaleTransformer,
    codec: &Codec,
    vocab: &PhonemeVocab,
    prompt: &PromptEmbedding,
    phonemes: &[String],
    durations: &[f64],
    f0: &F0Sequence,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<Synthesis> {
    if f0.is_empty() {
        return Err(Error::invalid("input melody has no frames"));
    }
    let frame_rate = codec.config.sample_rate as f64 / codec.config.hop as f64;
    let mut reg = regulate(phonemes, durations, frame_rate, vocab)?;
    reg.fit_to(f0.len());
    let prefix = inference_prefix(model, prompt, &reg.phoneme_ids, f0)?;
    let generation = model.infer(&prefix, sampling, rng)?;
    let audio = codec.decode(&generation.units)?;
    Ok(Synthesis { audio, generation })
}

/// Prompt/label pairs for encoder fine-tuning: random label combinations
/// rendered with `templates`.
pub fn encoder_finetune_pairs<R: Rng + ?Sized>(
    count: usize,
    keywords: &KeywordBank,
    templates: &TemplateBank,
    rng: &mut R,
) -> Result<Vec<(String, AttributeLabels)>> {
    let combos = label_combinations();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 20 + 100 {
            return Err(Error::config("template bank cannot render the requested label combinations"));
        }
        let labels = *combos.choose(rng).expect("non-empty");
        if templates.matching(&labels).next().is_none() {
            continue;
        }
        let s = assemble_prompt(&labels, keywords, templates, rng)?;
        out.push((s.sentence, labels));
    }
    Ok(out)
}

/// Every valid non-empty label combination.
pub fn label_combinations() -> Vec<AttributeLabels> {
    use crate::prompt::{VocalRange, Volume};
    let mut out = Vec::new();
    for g in std::iter::once(None).chain(Gender::ALL.map(Some)) {
        for v in std::iter::once(None).chain(Volume::ALL.map(Some)) {
            let ranges: Vec<Option<VocalRange>> = match g {
                Some(_) => std::iter::once(None).chain(VocalRange::ALL.map(Some)).collect(),
                None => vec![None],
            };
            for r in ranges {
                let l = AttributeLabels {
                    gender: g,
                    volume: v,
                    vocal_range: r,
                };
                if !l.is_empty() {
                    out.push(l);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_combinations_are_valid_and_complete() {
        let all = label_combinations();
        // gender x range: 2*3 + 1, volume: 4 choices, minus the empty one
        assert_eq!(all.len(), 7 * 4 - 1);
        for l in &all {
            l.validate().unwrap();
        }
    }

    #[test]
    fn fit_f0_pads_and_truncates() {
        assert_eq!(fit_f0(&[1.0, 2.0], 3).0, vec![1.0, 2.0, 0.0]);
        assert_eq!(fit_f0(&[1.0, 2.0, 3.0], 2).0, vec![1.0, 2.0]);
    }
}
