//! Pluggable prompt encoders.
//!
//! A backend turns a sentence into a sequence of frozen vectors of its own
//! width. The transformer owns one trainable projection per backend that maps
//! those vectors to the model width.

mod toy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::AttributeLabels;

pub use toy::{FinetuneConfig, FinetuneReport, ToyEncoder, ToyEncoderConfig, TOY_BACKEND};

/// Backend output for one sentence, before projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    pub vectors: Vec<Vec<f32>>,
    pub encoder_id: String,
    pub pooled: bool,
}

impl PromptEmbedding {
    pub fn width(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub trait PromptBackend: Send + Sync {
    fn id(&self) -> &str;
    fn width(&self) -> usize;
    /// One vector per token. Must be deterministic and must not mutate state.
    fn token_vectors(&self, sentence: &str) -> Result<Vec<Vec<f32>>>;
    /// Digest of every parameter the backend reads.
    fn checksum(&self) -> String;
    /// Labels predicted by a fine-tuned classification head, if any.
    fn predict_labels(&self, _sentence: &str) -> Result<AttributeLabels> {
        Err(Error::config(format!("backend {} has no label head", self.id())))
    }
}

/// Encodes `sentence`; `pooled` averages the tokens into a single vector.
pub fn encode_prompt(sentence: &str, backend: &dyn PromptBackend, pooled: bool) -> Result<PromptEmbedding> {
    if sentence.trim().is_empty() {
        return Err(Error::invalid("prompt sentence is empty"));
    }
    let mut vectors = backend.token_vectors(sentence)?;
    if vectors.is_empty() {
        return Err(Error::invalid(format!("backend {} produced no tokens", backend.id())));
    }
    if pooled {
        let n = vectors.len() as f32;
        let mut mean = vec![0.0; backend.width()];
        for v in &vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / n;
            }
        }
        vectors = vec![mean];
    }
    Ok(PromptEmbedding {
        vectors,
        encoder_id: backend.id().to_string(),
        pooled,
    })
}

/// Named backends available to a run.
#[derive(Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Box<dyn PromptBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, backend: Box<dyn PromptBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn names(&self) -> Vec<&str> {
        self.backends.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn PromptBackend> {
        self.backends.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::config(format!(
                "prompt encoder backend {name:?} is not available; registered: [{}]",
                self.names().join(", ")
            ))
        })
    }

    /// Fails on the first name that does not resolve.
    pub fn resolve_all<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for n in names {
            self.get(n)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_lists_backends_on_miss() {
        let mut reg = BackendRegistry::new();
        reg.register(Box::new(ToyEncoder::new(ToyEncoderConfig::default())));
        let err = reg.get("flan-t5-large").err().unwrap().to_string();
        assert!(err.contains(TOY_BACKEND), "{err}");
        assert!(reg.resolve_all([TOY_BACKEND]).is_ok());
    }

    #[test]
    fn empty_sentence_rejected() {
        let enc = ToyEncoder::new(ToyEncoderConfig::default());
        assert!(encode_prompt("   ", &enc, false).is_err());
        let e = encode_prompt("a loud lady", &enc, false).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(encode_prompt("a loud lady", &enc, true).unwrap().len(), 1);
    }
}
