//! Unified token vocabulary: specials, phonemes, pitch values, then one
//! block of `K` acoustic codes per codebook.

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const SEP_PROMPT: u32 = 1;
pub const SEP_PHONEME: u32 = 2;
pub const SEP_MELODY: u32 = 3;
pub const SEP_RANGE: u32 = 4;
pub const EOS: u32 = 5;
pub const N_SPECIALS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub phonemes: usize,
    /// Pitch tokens cover 0 (unvoiced) ..= max_pitch Hz.
    pub max_pitch: u32,
    pub n_q: usize,
    pub codebook_size: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.acoustic_offset() as usize + self.n_q * self.codebook_size
    }

    pub fn phoneme_offset(&self) -> u32 {
        N_SPECIALS as u32
    }

    pub fn pitch_offset(&self) -> u32 {
        self.phoneme_offset() + self.phonemes as u32
    }

    pub fn acoustic_offset(&self) -> u32 {
        self.pitch_offset() + self.max_pitch + 1
    }

    pub fn phoneme(&self, id: u32) -> u32 {
        self.phoneme_offset() + id
    }

    pub fn pitch(&self, hz: u32) -> u32 {
        self.pitch_offset() + hz
    }

    pub fn acoustic(&self, codebook: usize, index: u32) -> u32 {
        self.acoustic_offset() + (codebook * self.codebook_size) as u32 + index
    }

    pub fn is_phoneme(&self, tok: u32) -> bool {
        (self.phoneme_offset()..self.pitch_offset()).contains(&tok)
    }

    pub fn is_pitch(&self, tok: u32) -> bool {
        (self.pitch_offset()..self.acoustic_offset()).contains(&tok)
    }

    /// Codebook and index of an acoustic token.
    pub fn acoustic_parts(&self, tok: u32) -> Option<(usize, u32)> {
        let rel = tok.checked_sub(self.acoustic_offset())? as usize;
        (rel < self.n_q * self.codebook_size)
            .then(|| (rel / self.codebook_size, (rel % self.codebook_size) as u32))
    }
}
