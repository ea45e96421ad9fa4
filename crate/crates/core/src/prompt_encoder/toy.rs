//! Keyword-aware bag-of-subwords encoder.
//!
//! Each word is the mean of a hashed word row and hashed character-trigram
//! rows, plus a flag row naming the keyword category the word matches (or a
//! shared no-keyword row).

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PromptBackend;
use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};
use crate::prompt::{Attribute, AttributeLabels, KeywordBank};

pub const TOY_BACKEND: &str = "toy-bow";
const N_CATEGORIES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyEncoderConfig {
    pub width: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            buckets: 2048,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub config: ToyEncoderConfig,
    /// Keyword and its multi-hot category index.
    lexicon: Vec<(String, usize)>,
    /// `(buckets + 1 + N_CATEGORIES) x width`, row-major.
    table: Vec<f32>,
    /// `width x N_CATEGORIES` then `N_CATEGORIES` biases; empty until tuned.
    head: Vec<f32>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn words(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn category_index(attr: Attribute, category: &str) -> usize {
    let mut offset = 0;
    for a in Attribute::ALL {
        if a == attr {
            return offset + a.categories().iter().position(|c| *c == category).unwrap_or(0);
        }
        offset += a.categories().len();
    }
    unreachable!()
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig) -> Self {
        Self::with_keywords(config, &KeywordBank::builtin())
    }

    pub fn with_keywords(config: ToyEncoderConfig, bank: &KeywordBank) -> Self {
        let mut lexicon: Vec<(String, usize)> = bank
            .lexicon()
            .map(|(a, c, w)| (w.to_lowercase(), category_index(a, c)))
            .collect();
        lexicon.sort();
        let rows = config.buckets + 1 + N_CATEGORIES;
        let mut rng = nn::init_rng(config.seed);
        let mut store = ParamStore::new();
        let t = store
            .add("table", &[rows, config.width], Init::Normal(0.3), &mut rng)
            .expect("fresh store");
        Self {
            config,
            lexicon,
            table: nn::flat(&t).expect("cpu tensor"),
            head: vec![],
        }
    }

    fn flag_of(&self, word: &str) -> Option<usize> {
        let lookup = |w: &str| {
            self.lexicon
                .binary_search_by(|(k, _)| k.as_str().cmp(w))
                .ok()
                .map(|i| self.lexicon[i].1)
        };
        lookup(word).or_else(|| word.split('-').find_map(lookup))
    }

    /// Table rows and weights contributing to each word's vector.
    fn word_rows(&self, sentence: &str) -> Vec<Vec<(usize, f32)>> {
        let b = self.config.buckets as u64;
        words(sentence)
            .iter()
            .map(|w| {
                let mut ids = vec![(fnv1a(&format!("w:{w}")) % b) as usize];
                let padded: Vec<char> = format!("<{w}>").chars().collect();
                for tri in padded.windows(3) {
                    let s: String = tri.iter().collect();
                    ids.push((fnv1a(&format!("t:{s}")) % b) as usize);
                }
                let share = 1.0 / ids.len() as f32;
                let mut rows: Vec<(usize, f32)> = ids.into_iter().map(|i| (i, share)).collect();
                let flag = self.config.buckets + self.flag_of(w).map_or(0, |c| c + 1);
                rows.push((flag, 1.0));
                rows
            })
            .collect()
    }

    fn pooled_weights(&self, sentence: &str) -> Vec<f32> {
        let rows = self.table.len() / self.config.width;
        let mut a = vec![0.0; rows];
        let words = self.word_rows(sentence);
        let n = words.len().max(1) as f32;
        for w in &words {
            for &(r, s) in w {
                a[r] += s / n;
            }
        }
        a
    }

    pub fn is_tuned(&self) -> bool {
        !self.head.is_empty()
    }

    /// Trains the table and a 7-way sigmoid head on `train`, reporting
    /// exact-match label accuracy on `heldout`.
    pub fn finetune_multilabel(
        &mut self,
        train: &[(String, AttributeLabels)],
        heldout: &[(String, AttributeLabels)],
        cfg: &FinetuneConfig,
    ) -> Result<FinetuneReport> {
        if train.is_empty() {
            return Err(Error::config("no prompt-label pairs to fine-tune on"));
        }
        for (s, l) in train.iter().chain(heldout) {
            l.validate().map_err(|e| Error::config(format!("label for {s:?}: {e}")))?;
            if l.is_empty() {
                return Err(Error::config(format!("prompt {s:?} has no labels")));
            }
        }
        let width = self.config.width;
        let rows = self.table.len() / width;
        let mut rng = nn::init_rng(cfg.seed);
        let mut store = ParamStore::new();
        store.add("table", &[rows, width], Init::Zeros, &mut rng)?;
        store.set("table", &self.table)?;
        let w = store.add("head.w", &[width, N_CATEGORIES], Init::Normal(0.1), &mut rng)?;
        let bias = store.add("head.b", &[N_CATEGORIES], Init::Zeros, &mut rng)?;
        let table = store.get("table")?.as_tensor().clone();
        let mut opt = AdamW::new(
            store.vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let dev = nn::device();
        let feats: Vec<Vec<f32>> = train.iter().map(|(s, _)| self.pooled_weights(s)).collect();
        let targets: Vec<Vec<f32>> = train.iter().map(|(_, l)| l.multi_hot()).collect();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let a: Vec<f32> = batch.iter().flat_map(|&i| feats[i].iter().copied()).collect();
                let y: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
                let a = Tensor::from_vec(a, (batch.len(), rows), &dev)?;
                let y = Tensor::from_vec(y, (batch.len(), N_CATEGORIES), &dev)?;
                let logits = nn::linear(&a.matmul(&table)?, &w, Some(&bias))?;
                // softplus(z) - y*z, computed stably
                let sp = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
                let loss = (sp - (&y * &logits)?)?.mean_all()?;
                opt.backward_step(&loss)?;
                epoch_loss += loss.to_scalar::<f32>()? * batch.len() as f32;
            }
            losses.push(epoch_loss / train.len() as f32);
        }
        self.table = nn::flat(&table)?;
        let mut head = nn::flat(&w)?;
        head.extend(nn::flat(&bias)?);
        self.head = head;
        let accuracy = |pairs: &[(String, AttributeLabels)]| -> Result<f64> {
            if pairs.is_empty() {
                return Ok(f64::NAN);
            }
            let mut ok = 0;
            for (s, l) in pairs {
                if self.predict_labels(s)? == *l {
                    ok += 1;
                }
            }
            Ok(100.0 * ok as f64 / pairs.len() as f64)
        };
        Ok(FinetuneReport {
            train_accuracy: accuracy(train)?,
            heldout_accuracy: accuracy(heldout)?,
            losses,
        })
    }

    /// Pooled vector of a sentence.
    pub fn pooled(&self, sentence: &str) -> Vec<f32> {
        let width = self.config.width;
        let a = self.pooled_weights(sentence);
        let mut out = vec![0.0; width];
        for (r, &s) in a.iter().enumerate() {
            if s != 0.0 {
                for (o, v) in out.iter_mut().zip(&self.table[r * width..(r + 1) * width]) {
                    *o += s * v;
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::data(format!("encoder serialisation: {e}")))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let enc: Self = serde_json::from_slice(bytes).map_err(|e| Error::data(format!("encoder file: {e}")))?;
        let rows = enc.config.buckets + 1 + N_CATEGORIES;
        if enc.table.len() != rows * enc.config.width
            || !(enc.head.is_empty() || enc.head.len() == (enc.config.width + 1) * N_CATEGORIES)
        {
            return Err(Error::data("encoder file shapes disagree with its config"));
        }
        Ok(enc)
    }
}

impl PromptBackend for ToyEncoder {
    fn id(&self) -> &str {
        TOY_BACKEND
    }

    fn width(&self) -> usize {
        self.config.width
    }

    fn token_vectors(&self, sentence: &str) -> Result<Vec<Vec<f32>>> {
        let width = self.config.width;
        Ok(self
            .word_rows(sentence)
            .iter()
            .map(|rows| {
                let mut v = vec![0.0; width];
                for &(r, s) in rows {
                    for (o, x) in v.iter_mut().zip(&self.table[r * width..(r + 1) * width]) {
                        *o += s * x;
                    }
                }
                v
            })
            .collect())
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(TOY_BACKEND.as_bytes());
        for v in self.table.iter().chain(&self.head) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn predict_labels(&self, sentence: &str) -> Result<AttributeLabels> {
        if !self.is_tuned() {
            return Err(Error::Untrained("toy encoder label head is not fine-tuned".into()));
        }
        let width = self.config.width;
        let x = self.pooled(sentence);
        let scores: Vec<f32> = (0..N_CATEGORIES)
            .map(|c| {
                let z: f32 = (0..width).map(|i| x[i] * self.head[i * N_CATEGORIES + c]).sum::<f32>()
                    + self.head[width * N_CATEGORIES + c];
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        let mut labels = AttributeLabels::from_scores(&scores, 0.5);
        if labels.gender.is_none() {
            labels.vocal_range = None;
        }
        Ok(labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.02,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub losses: Vec<f32>,
}
