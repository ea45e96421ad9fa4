//! Versioned checkpoint container.
//!
//! Layout: `SVSCKPT\0`, format version (u32 LE), header length (u32 LE),
//! JSON header (config, step count, rng state, tensor index), then every
//! tensor as little-endian f32 in index order. Tensors are sorted by name.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::MultiScaleTransformer;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::nn;

const MAGIC: &[u8; 8] = b"SVSCKPT\0";
const VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::data("checkpoint rng state is malformed");
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    steps: u64,
    rng: Option<RngState>,
    tensors: Vec<TensorEntry>,
}

impl MultiScaleTransformer {
    pub fn to_checkpoint_bytes(&self, rng: Option<&ChaCha8Rng>) -> Result<Vec<u8>> {
        let tensors = self
            .params
            .iter()
            .map(|(name, v)| TensorEntry {
                name: name.to_string(),
                shape: v.dims().to_vec(),
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            steps: self.steps,
            rng: rng.map(RngState::capture),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 16 + 4 * self.params.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in self.params.iter() {
            for x in nn::flat(v.as_tensor())? {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(Self, Option<RngState>)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::data("not a model checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::data(format!("checkpoint format {version}, expected {VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::data("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
        let mut model = MultiScaleTransformer::new(header.config)?;
        let names: Vec<&str> = model.params.names().collect();
        if names.len() != header.tensors.len() || names.iter().zip(&header.tensors).any(|(a, b)| *a != b.name) {
            return Err(Error::data("checkpoint tensors do not match the model built from its config"));
        }
        let mut off = 16 + hlen;
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| Error::data(format!("checkpoint truncated in {}", t.name)))?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            model.params.set(&t.name, &data)?;
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint tensors"));
        }
        model.steps = header.steps;
        Ok((model, header.rng))
    }

    pub fn save(&self, path: &Path, rng: Option<&ChaCha8Rng>) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes(rng)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<RngState>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
