//! The single concatenated sequence fed to the transformer.
//!
//! The sequence is a list of frames of `n_q` positions. Every non-acoustic
//! item fills one frame with `n_q` copies of itself. Segment order is
//! prompt, phonemes, melody, range factor, acoustic units, with a separator
//! frame between consecutive segments.

use serde::{Deserialize, Serialize};

use super::vocab::{self, Vocab};
use crate::codec::AcousticUnitSequence;
use crate::error::{Error, Result};
use crate::prompt_encoder::PromptEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Prompt,
    Separator,
    Phoneme,
    Melody,
    RangeFactor,
    Acoustic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// First frame.
    pub start: usize,
    /// Frames.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLayoutSequence {
    pub n_q: usize,
    /// `frames * n_q` token ids; prompt frames hold [`vocab::PAD`].
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub prompt: PromptEmbedding,
    /// One flag per position.
    pub loss_mask: Vec<bool>,
}

/// Inputs recovered from a layout's segment map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSpans {
    pub prompt_len: usize,
    pub phonemes: Vec<u32>,
    pub melody: Vec<u32>,
    pub range_factor: Option<u32>,
    pub units: Option<Vec<Vec<u32>>>,
}

/// Lays out one utterance.
///
/// With `units` absent the result is an inference prefix ending at the
/// melody separator, and `range_factor` must be absent too. With `units`
/// present and `range_factor` absent the range-factor segment is omitted.
pub fn build_sequence(
    prompt: &PromptEmbedding,
    phonemes: &[u32],
    melody: &[u32],
    range_factor: Option<u32>,
    units: Option<&AcousticUnitSequence>,
    vocab: &Vocab,
) -> Result<TokenLayoutSequence> {
    let n_q = vocab.n_q;
    if prompt.is_empty() {
        return Err(Error::invalid("prompt segment is empty"));
    }
    if phonemes.len() != melody.len() {
        return Err(Error::invalid(format!(
            "phoneme segment has {} frames but melody segment has {}",
            phonemes.len(),
            melody.len()
        )));
    }
    if let Some(u) = units {
        if u.len() != melody.len() {
            return Err(Error::invalid(format!(
                "acoustic segment has {} frames but melody segment has {}",
                u.len(),
                melody.len()
            )));
        }
        if u.n_q() != n_q || u.codebook_size() != vocab.codebook_size {
            return Err(Error::invalid(format!(
                "acoustic units are {}x{}, vocabulary expects n_q={n_q} K={}",
                u.n_q(),
                u.codebook_size(),
                vocab.codebook_size
            )));
        }
    } else if range_factor.is_some() {
        return Err(Error::invalid("range factor given without acoustic units"));
    }
    if let Some(&p) = phonemes.iter().find(|&&p| p as usize >= vocab.phonemes) {
        return Err(Error::invalid(format!("phoneme id {p} >= vocabulary size {}", vocab.phonemes)));
    }
    if let Some(&m) = melody.iter().chain(range_factor.iter()).find(|&&m| m > vocab.max_pitch) {
        return Err(Error::invalid(format!("pitch {m} Hz exceeds the {} Hz vocabulary", vocab.max_pitch)));
    }
    if range_factor == Some(0) {
        return Err(Error::invalid("range factor must be a voiced pitch"));
    }

    let mut b = Builder {
        n_q,
        tokens: vec![],
        segments: vec![],
        loss_mask: vec![],
    };
    b.push(SegmentKind::Prompt, prompt.len(), |_| [vocab::PAD].repeat(n_q), false);
    b.sep(vocab::SEP_PROMPT);
    b.push(SegmentKind::Phoneme, phonemes.len(), |t| vec![vocab.phoneme(phonemes[t]); n_q], false);
    b.sep(vocab::SEP_PHONEME);
    b.push(SegmentKind::Melody, melody.len(), |t| vec![vocab.pitch(melody[t]); n_q], false);
    b.sep(vocab::SEP_MELODY);
    if let Some(u) = units {
        if let Some(rf) = range_factor {
            b.push(SegmentKind::RangeFactor, 1, |_| vec![vocab.pitch(rf); n_q], true);
            b.sep(vocab::SEP_RANGE);
        }
        let frames = u.frames();
        b.push(
            SegmentKind::Acoustic,
            frames.len(),
            |t| (0..n_q).map(|c| vocab.acoustic(c, frames[t][c])).collect(),
            true,
        );
    }
    Ok(TokenLayoutSequence {
        n_q,
        tokens: b.tokens,
        segments: b.segments,
        prompt: prompt.clone(),
        loss_mask: b.loss_mask,
    })
}

struct Builder {
    n_q: usize,
    tokens: Vec<u32>,
    segments: Vec<Segment>,
    loss_mask: Vec<bool>,
}

impl Builder {
    fn frames(&self) -> usize {
        self.tokens.len() / self.n_q
    }

    fn push(&mut self, kind: SegmentKind, len: usize, frame: impl Fn(usize) -> Vec<u32>, loss: bool) {
        let start = self.frames();
        for t in 0..len {
            self.tokens.extend(frame(t));
        }
        self.loss_mask.extend(std::iter::repeat_n(loss, len * self.n_q));
        self.segments.push(Segment { kind, start, len });
    }

    fn sep(&mut self, tok: u32) {
        let n_q = self.n_q;
        self.push(SegmentKind::Separator, 1, |_| vec![tok; n_q], false);
    }
}

impl TokenLayoutSequence {
    pub fn frames(&self) -> usize {
        self.tokens.len() / self.n_q
    }

    pub fn positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn frame(&self, f: usize) -> &[u32] {
        &self.tokens[f * self.n_q..(f + 1) * self.n_q]
    }

    pub fn segment(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    pub fn kind_of_frame(&self, f: usize) -> Option<SegmentKind> {
        self.segments
            .iter()
            .find(|s| (s.start..s.start + s.len).contains(&f))
            .map(|s| s.kind)
    }

    /// Frames the model is trained to predict (loss-masked frames).
    pub fn target_frames(&self) -> Vec<usize> {
        (0..self.frames()).filter(|&f| self.loss_mask[f * self.n_q]).collect()
    }

    pub fn is_inference_prefix(&self) -> bool {
        self.segment(SegmentKind::Acoustic).is_none()
    }

    /// Structural checks: segment order and coverage, repeated items, token
    /// ranges and the loss mask.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        use SegmentKind::*;
        if self.n_q != vocab.n_q || self.tokens.len() % self.n_q != 0 {
            return Err(Error::invalid("layout is not a whole number of n_q-frames"));
        }
        if self.loss_mask.len() != self.tokens.len() {
            return Err(Error::invalid("loss mask length differs from token count"));
        }
        let kinds: Vec<SegmentKind> = self.segments.iter().map(|s| s.kind).collect();
        let allowed: [&[SegmentKind]; 3] = [
            &[Prompt, Separator, Phoneme, Separator, Melody, Separator],
            &[Prompt, Separator, Phoneme, Separator, Melody, Separator, Acoustic],
            &[Prompt, Separator, Phoneme, Separator, Melody, Separator, RangeFactor, Separator, Acoustic],
        ];
        if !allowed.iter().any(|a| *a == kinds.as_slice()) {
            return Err(Error::invalid(format!("segment order {kinds:?} is not a valid layout")));
        }
        let mut next = 0;
        for s in &self.segments {
            if s.start != next {
                return Err(Error::invalid(format!("segment {:?} starts at frame {} not {next}", s.kind, s.start)));
            }
            next += s.len;
        }
        if next != self.frames() {
            return Err(Error::invalid("segments do not cover the sequence"));
        }
        if self.prompt.len() != self.segments[0].len {
            return Err(Error::invalid("prompt segment length differs from prompt embedding"));
        }
        let seps = [vocab::SEP_PROMPT, vocab::SEP_PHONEME, vocab::SEP_MELODY, vocab::SEP_RANGE];
        let mut sep_i = 0;
        for s in &self.segments {
            for f in s.start..s.start + s.len {
                let frame = self.frame(f);
                if s.kind != Acoustic && frame.iter().any(|&t| t != frame[0]) {
                    return Err(Error::invalid(format!(
                        "{:?} frame {f} is not {} copies of one item: {frame:?}",
                        s.kind, self.n_q
                    )));
                }
                let ok = match s.kind {
                    Prompt => frame[0] == vocab::PAD,
                    Separator => frame[0] == seps[sep_i],
                    Phoneme => vocab.is_phoneme(frame[0]),
                    Melody => vocab.is_pitch(frame[0]),
                    RangeFactor => vocab.is_pitch(frame[0]) && frame[0] != vocab.pitch(0),
                    Acoustic => frame
                        .iter()
                        .enumerate()
                        .all(|(c, &t)| vocab.acoustic_parts(t).is_some_and(|(cb, _)| cb == c)),
                };
                if !ok {
                    return Err(Error::invalid(format!("frame {f} of {:?} has out-of-range tokens {frame:?}", s.kind)));
                }
                let want = matches!(s.kind, RangeFactor | Acoustic);
                if self.loss_mask[f * self.n_q..(f + 1) * self.n_q].iter().any(|&m| m != want) {
                    return Err(Error::invalid(format!("loss mask wrong on frame {f}")));
                }
            }
            if s.kind == Separator {
                sep_i += 1;
            }
        }
        Ok(())
    }

    /// Recovers the inputs the layout was built from.
    pub fn spans(&self, vocab: &Vocab) -> LayoutSpans {
        let items = |kind| -> Vec<u32> {
            self.segment(kind)
                .map(|s| (s.start..s.start + s.len).map(|f| self.frame(f)[0]).collect())
                .unwrap_or_default()
        };
        LayoutSpans {
            prompt_len: self.segment(SegmentKind::Prompt).map_or(0, |s| s.len),
            phonemes: items(SegmentKind::Phoneme).iter().map(|t| t - vocab.phoneme_offset()).collect(),
            melody: items(SegmentKind::Melody).iter().map(|t| t - vocab.pitch_offset()).collect(),
            range_factor: items(SegmentKind::RangeFactor).first().map(|t| t - vocab.pitch_offset()),
            units: self.segment(SegmentKind::Acoustic).map(|s| {
                (s.start..s.start + s.len)
                    .map(|f| {
                        self.frame(f)
                            .iter()
                            .map(|&t| vocab.acoustic_parts(t).expect("validated").1)
                            .collect()
                    })
                    .collect()
            }),
        }
    }
}
