use candle_core::{DType, Tensor, D};
use candle_nn::ops::{log_softmax, softmax_last_dim};
use candle_nn::{AdamW, Optimizer};
use rand::Rng;

use super::layout::{SegmentKind, TokenLayoutSequence};
use super::vocab::{self, Vocab, N_SPECIALS};
use super::{ModelConfig, SamplingConfig};
use crate::codec::AcousticUnitSequence;
use crate::error::{Error, Result};
use crate::nn::{self, causal_mask, layer_norm, linear, Init, ParamStore};
use crate::pitch::MELODY_MEAN_HZ;
use crate::prompt_encoder::PromptEmbedding;

/// Attention over at most this many positions avoids batched matmuls.
const SHORT_ATTENTION: usize = 8;

pub struct MultiScaleTransformer {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub(super) params: ParamStore,
    pub(super) steps: u64,
    positions: Tensor,
    rope_cos: Tensor,
    rope_sin: Tensor,
    pitch_table: Tensor,
}

/// Output of [`MultiScaleTransformer::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub range_factor: Option<u32>,
    pub units: AcousticUnitSequence,
    /// Probability of each emitted token under the sampling distribution.
    pub step_probs: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Head {
    Range,
    Acoustic,
}

/// Picks a support index given its probabilities.
type Chooser<'a> = dyn FnMut(usize, &[f64]) -> Result<usize> + 'a;

impl MultiScaleTransformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab();
        let d = config.hidden;
        let ds = d / config.n_q;
        let nf = 2 * config.pitch_features;
        let std = config.init_std;
        let mut rng = nn::init_rng(config.seed);
        let mut p = ParamStore::new();
        let v = vocab.size();
        p.add("emb.global", &[v, ds], Init::Normal(std), &mut rng)?;
        p.add("emb.local", &[v, d], Init::Normal(std), &mut rng)?;
        p.add("pitch.global.w", &[nf.max(1), ds], Init::Normal(std), &mut rng)?;
        p.add("pitch.local.w", &[nf.max(1), d], Init::Normal(std), &mut rng)?;
        for (name, &width) in &config.prompt_encoders {
            p.add(&format!("prompt.proj.{name}.w"), &[width, d], Init::Normal(std), &mut rng)?;
            p.add(&format!("prompt.proj.{name}.b"), &[d], Init::Zeros, &mut rng)?;
        }
        p.add("prompt.slot.w", &[d, ds], Init::Normal(std), &mut rng)?;
        p.add("prompt.slot.b", &[ds], Init::Zeros, &mut rng)?;
        for l in 0..config.global_layers {
            add_block(&mut p, &format!("global.{l}"), d, config.ff_width, std, &mut rng)?;
        }
        p.add("global.ln_f.g", &[d], Init::Ones, &mut rng)?;
        p.add("global.ln_f.b", &[d], Init::Zeros, &mut rng)?;
        p.add("local.ctx.w", &[ds, d], Init::Normal(std), &mut rng)?;
        p.add("local.ctx.b", &[d], Init::Zeros, &mut rng)?;
        for l in 0..config.local_layers {
            add_block(&mut p, &format!("local.{l}"), d, config.ff_width, std, &mut rng)?;
        }
        p.add("local.ln_f.g", &[d], Init::Ones, &mut rng)?;
        p.add("local.ln_f.b", &[d], Init::Zeros, &mut rng)?;
        p.add("head.rf.w", &[d, N_SPECIALS + config.max_pitch as usize + 1], Init::Normal(std), &mut rng)?;
        p.add("head.rf.b", &[N_SPECIALS + config.max_pitch as usize + 1], Init::Zeros, &mut rng)?;
        for c in 0..config.n_q {
            p.add(&format!("head.ac.{c}.w"), &[d, N_SPECIALS + config.codebook_size], Init::Normal(std), &mut rng)?;
            p.add(&format!("head.ac.{c}.b"), &[N_SPECIALS + config.codebook_size], Init::Zeros, &mut rng)?;
        }
        Ok(Self {
            positions: nn::sinusoidal(config.max_frames, d)?,
            rope_cos: nn::rotary_table(config.max_frames, d / config.global_heads, f64::cos)?,
            rope_sin: nn::rotary_table(config.max_frames, d / config.global_heads, f64::sin)?,
            pitch_table: pitch_table(&vocab, config.pitch_features)?,
            config,
            vocab,
            params: p,
            steps: 0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn is_trained(&self) -> bool {
        self.steps > 0
    }

    pub fn optimizer(&self, lr: f64) -> Result<AdamW> {
        Ok(AdamW::new(
            self.params.vars(),
            candle_nn::ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?)
    }

    fn w(&self, name: &str) -> Result<Tensor> {
        Ok(self.params.get(name)?.as_tensor().clone())
    }

    fn block(&self, prefix: &str, x: &Tensor, heads: usize, mask: &Tensor, rope: Option<&(Tensor, Tensor)>) -> Result<Tensor> {
        let h = layer_norm(x, &self.w(&format!("{prefix}.ln1.g"))?, &self.w(&format!("{prefix}.ln1.b"))?)?;
        let (b, l, d) = h.dims3()?;
        let dh = d / heads;
        let qkv = linear(&h, &self.w(&format!("{prefix}.qkv.w"))?, Some(&self.w(&format!("{prefix}.qkv.b"))?))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * d, d)?
                .reshape((b, l, heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (mut q, mut k, v) = (split(0)?, split(1)?, split(2)?);
        if let Some((cos, sin)) = rope {
            q = rotate(&q, cos, sin)?;
            k = rotate(&k, cos, sin)?;
        }
        let scale = 1.0 / (dh as f64).sqrt();
        // Many tiny batched matmuls are slow on CPU, especially backwards;
        // short sequences use broadcast products instead.
        let y = if l <= SHORT_ATTENTION {
            let att = (q.unsqueeze(3)?.broadcast_mul(&k.unsqueeze(2)?)?.sum(D::Minus1)? * scale)?.broadcast_add(mask)?;
            let att = softmax_last_dim(&att)?;
            att.unsqueeze(D::Minus1)?.broadcast_mul(&v.unsqueeze(2)?)?.sum(3)?
        } else {
            let att = (q.matmul(&k.t()?)? * scale)?.broadcast_add(mask)?;
            softmax_last_dim(&att)?.matmul(&v)?
        };
        let y = y.transpose(1, 2)?.reshape((b, l, d))?;
        let y = linear(&y, &self.w(&format!("{prefix}.out.w"))?, Some(&self.w(&format!("{prefix}.out.b"))?))?;
        let x = (x + y)?;
        let h = layer_norm(&x, &self.w(&format!("{prefix}.ln2.g"))?, &self.w(&format!("{prefix}.ln2.b"))?)?;
        let f = linear(&h, &self.w(&format!("{prefix}.ff1.w"))?, Some(&self.w(&format!("{prefix}.ff1.b"))?))?.gelu()?;
        let f = linear(&f, &self.w(&format!("{prefix}.ff2.w"))?, Some(&self.w(&format!("{prefix}.ff2.b"))?))?;
        Ok((x + f)?)
    }

    /// Causal global transformer over frame embeddings `(B, F, hidden)` at
    /// absolute frame positions.
    pub fn global_forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, f, _) = x.dims3()?;
        let pos: Vec<u32> = (0..b).flat_map(|_| 0..f as u32).collect();
        self.global_forward_at(x, &pos)
    }

    /// As [`Self::global_forward`] with an explicit position per frame,
    /// `B * F` entries.
    fn global_forward_at(&self, x: &Tensor, pos: &[u32]) -> Result<Tensor> {
        let (b, f, d) = x.dims3()?;
        if f > self.config.max_frames {
            return Err(Error::Capacity {
                len: f,
                max: self.config.max_frames,
            });
        }
        if d != self.config.hidden {
            return Err(Error::invalid(format!("frame embedding width {d} != hidden {}", self.config.hidden)));
        }
        let idx = Tensor::from_slice(pos, b * f, &nn::device())?;
        let mask = causal_mask(f)?;
        let (mut h, rope) = if self.config.rotary {
            let half = self.rope_cos.dims()[1];
            let gather = |t: &Tensor| -> Result<Tensor> { Ok(t.index_select(&idx, 0)?.reshape((b, 1, f, half))?) };
            (x.clone(), Some((gather(&self.rope_cos)?, gather(&self.rope_sin)?)))
        } else {
            (x.broadcast_add(&self.positions.index_select(&idx, 0)?.reshape((b, f, d))?)?, None)
        };
        for l in 0..self.config.global_layers {
            h = self.block(&format!("global.{l}"), &h, self.config.global_heads, &mask, rope.as_ref())?;
        }
        layer_norm(&h, &self.w("global.ln_f.g")?, &self.w("global.ln_f.b")?)
    }

    /// Local transformer hidden states `(N, n_q, hidden)`.
    ///
    /// `ctx` is the global hidden state of the previous frame `(N, hidden)`;
    /// `frame_emb[:, c]` embeds this frame's codebook-`c` token and feeds
    /// position `c + 1`. Position 0 sees a fixed start embedding.
    pub fn local_forward(&self, ctx: &Tensor, frame_emb: &Tensor) -> Result<Tensor> {
        let n_q = self.config.n_q;
        let d = self.config.hidden;
        let (n, cd) = ctx.dims2()?;
        if cd != d {
            return Err(Error::invalid(format!("frame context width {cd} != hidden {d}")));
        }
        let (n2, q2, d2) = frame_emb.dims3()?;
        if (n2, q2, d2) != (n, n_q, d) {
            return Err(Error::invalid(format!("local input is {n2}x{q2}x{d2}, expected {n}x{n_q}x{d}")));
        }
        let chunks = ctx.reshape((n, n_q, d / n_q))?;
        let ctx = linear(&chunks, &self.w("local.ctx.w")?, Some(&self.w("local.ctx.b")?))?;
        let start = self
            .w("emb.local")?
            .narrow(0, vocab::PAD as usize, 1)?
            .reshape((1, 1, d))?
            .broadcast_as((n, 1, d))?;
        let shifted = if n_q > 1 {
            Tensor::cat(&[&start, &frame_emb.narrow(1, 0, n_q - 1)?], 1)?
        } else {
            start.contiguous()?
        };
        let mut h = (ctx + shifted)?;
        let mask = causal_mask(n_q)?;
        for l in 0..self.config.local_layers {
            h = self.block(&format!("local.{l}"), &h, self.config.local_heads, &mask, None)?;
        }
        layer_norm(&h, &self.w("local.ln_f.g")?, &self.w("local.ln_f.b")?)
    }

    /// Acoustic logits `(N, n_q, specials + K)`; codebook `c` uses head `c`.
    pub fn acoustic_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let per_c = (0..self.config.n_q)
            .map(|c| {
                let h = hidden.narrow(1, c, 1)?.squeeze(1)?;
                linear(&h, &self.w(&format!("head.ac.{c}.w"))?, Some(&self.w(&format!("head.ac.{c}.b"))?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&per_c, 1)?)
    }

    /// Range-factor logits `(N, n_q, specials + max_pitch + 1)`.
    pub fn range_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        linear(hidden, &self.w("head.rf.w")?, Some(&self.w("head.rf.b")?))
    }

    fn head_logits(&self, head: Head, hidden: &Tensor) -> Result<Tensor> {
        match head {
            Head::Range => self.range_logits(hidden),
            Head::Acoustic => self.acoustic_logits(hidden),
        }
    }

    /// Token embeddings for the local transformer, `(N, n_q, hidden)`.
    pub fn local_embed(&self, ids: &[u32]) -> Result<Tensor> {
        let n = ids.len() / self.config.n_q;
        let ids = Tensor::from_slice(ids, ids.len(), &nn::device())?;
        let e = self.w("emb.local")?.embedding(&ids)?;
        let e = (e + self.pitch_table.embedding(&ids)?.matmul(&self.w("pitch.local.w")?)?)?;
        Ok(e.reshape((n, self.config.n_q, self.config.hidden))?)
    }

    /// Frame embeddings `(B, F, hidden)` for right-padded token sequences
    /// whose first `prompt.len()` frames carry the prompt.
    fn embed(&self, seqs: &[(&[u32], &PromptEmbedding)]) -> Result<(Tensor, Vec<u32>)> {
        let n_q = self.config.n_q;
        let d = self.config.hidden;
        let ds = d / n_q;
        let f_max = seqs.iter().map(|(t, _)| t.len() / n_q).max().unwrap_or(0);
        if f_max > self.config.max_frames {
            return Err(Error::Capacity {
                len: f_max,
                max: self.config.max_frames,
            });
        }
        let b = seqs.len();
        let mut ids = vec![vocab::PAD; b * f_max * n_q];
        let mut keep = vec![1f32; b * f_max * n_q];
        let mut prompt_rows = Vec::new();
        let mut prompt_idx = Vec::with_capacity(ids.len());
        let mut n_prompt = 0u32;
        for (i, (tokens, prompt)) in seqs.iter().enumerate() {
            ids[i * f_max * n_q..i * f_max * n_q + tokens.len()].copy_from_slice(tokens);
            let proj_w = self.params.get(&format!("prompt.proj.{}.w", prompt.encoder_id)).map_err(|_| {
                Error::config(format!("model has no projection for prompt encoder {:?}", prompt.encoder_id))
            })?;
            let width = prompt.width();
            if proj_w.dims()[0] != width {
                return Err(Error::invalid(format!(
                    "prompt vectors are {width} wide, projection for {} expects {}",
                    prompt.encoder_id,
                    proj_w.dims()[0]
                )));
            }
            let flat: Vec<f32> = prompt.vectors.iter().flatten().copied().collect();
            let pv = Tensor::from_vec(flat, (prompt.len(), width), &nn::device())?;
            let proj = linear(&pv, proj_w.as_tensor(), Some(&self.w(&format!("prompt.proj.{}.b", prompt.encoder_id))?))?;
            prompt_rows.push(linear(&proj, &self.w("prompt.slot.w")?, Some(&self.w("prompt.slot.b")?))?);
            for f in 0..f_max {
                for _ in 0..n_q {
                    if f < prompt.len() {
                        keep[prompt_idx.len()] = 0.0;
                        prompt_idx.push(n_prompt + f as u32);
                    } else {
                        prompt_idx.push(u32::MAX);
                    }
                }
            }
            n_prompt += prompt.len() as u32;
        }
        prompt_rows.push(Tensor::zeros((1, ds), DType::F32, &nn::device())?);
        let prompt_all = Tensor::cat(&prompt_rows, 0)?;
        let prompt_idx: Vec<u32> = prompt_idx
            .into_iter()
            .map(|i| if i == u32::MAX { n_prompt } else { i })
            .collect();
        let len = ids.len();
        let ids = Tensor::from_vec(ids, len, &nn::device())?;
        let tok = self.w("emb.global")?.embedding(&ids)?;
        let tok = (tok + self.pitch_table.embedding(&ids)?.matmul(&self.w("pitch.global.w")?)?)?;
        let keep = Tensor::from_vec(keep, (len, 1), &nn::device())?;
        let prompt_part = prompt_all.index_select(&Tensor::from_vec(prompt_idx, len, &nn::device())?, 0)?;
        let x = (tok.broadcast_mul(&keep)? + prompt_part)?.reshape((b, f_max, d))?;
        let mut pos = Vec::with_capacity(b * f_max);
        for (tokens, _) in seqs {
            let mut last_sep: Option<usize> = None;
            for f in 0..f_max {
                let tok = tokens.get(f * n_q).copied().unwrap_or(vocab::PAD);
                if self.config.segment_positions && (vocab::SEP_PROMPT..=vocab::SEP_RANGE).contains(&tok) {
                    last_sep = Some(f);
                }
                pos.push(last_sep.map_or(f, |s| f - s) as u32);
            }
        }
        Ok((x, pos))
    }

    /// Additive support mask over a head's columns.
    fn support_mask(&self, head: Head, allow_eos: bool) -> Result<Tensor> {
        let (width, lo) = match head {
            Head::Range => (N_SPECIALS + self.config.max_pitch as usize + 1, N_SPECIALS + 1),
            Head::Acoustic => (N_SPECIALS + self.config.codebook_size, N_SPECIALS),
        };
        let data: Vec<f32> = (0..width)
            .map(|i| {
                if i >= lo || (allow_eos && i == vocab::EOS as usize) {
                    0.0
                } else {
                    f32::NEG_INFINITY
                }
            })
            .collect();
        Ok(Tensor::from_vec(data, width, &nn::device())?)
    }

    /// Head column of a target token at codebook position `c`.
    fn target_column(&self, head: Head, tok: u32) -> u32 {
        match head {
            Head::Range => tok - self.vocab.pitch_offset() + N_SPECIALS as u32,
            Head::Acoustic => self.vocab.acoustic_parts(tok).expect("acoustic target").1 + N_SPECIALS as u32,
        }
    }

    /// Log-probabilities of every target position, grouped by head:
    /// `(rf rows (N_rf, n_q), acoustic rows (N_ac, n_q))`.
    fn target_log_probs(&self, batch: &[&TokenLayoutSequence]) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let n_q = self.config.n_q;
        for l in batch {
            l.validate(&self.vocab)?;
        }
        let seqs: Vec<(&[u32], &PromptEmbedding)> = batch.iter().map(|l| (l.tokens.as_slice(), &l.prompt)).collect();
        let (x, pos) = self.embed(&seqs)?;
        let h = self.global_forward_at(&x, &pos)?;
        let (b, f, d) = h.dims3()?;
        let h = h.reshape((b * f, d))?;
        let mut groups = [(Head::Range, vec![], vec![]), (Head::Acoustic, vec![], vec![])];
        for (i, l) in batch.iter().enumerate() {
            for t in l.target_frames() {
                let g = match l.kind_of_frame(t) {
                    Some(SegmentKind::RangeFactor) => 0,
                    _ => 1,
                };
                groups[g].1.push((i * f + t - 1) as u32);
                groups[g].2.extend_from_slice(l.frame(t));
            }
        }
        let mut out = [None, None];
        for (g, (head, rows, toks)) in groups.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let n = rows.len();
            let ctx = h.index_select(&Tensor::from_vec(rows, n, &nn::device())?, 0)?;
            let hidden = self.local_forward(&ctx, &self.local_embed(&toks)?)?;
            let logits = self.head_logits(head, &hidden)?.broadcast_add(&self.support_mask(head, false)?)?;
            let lp = log_softmax(&logits, D::Minus1)?;
            let cols: Vec<u32> = toks.iter().map(|&t| self.target_column(head, t)).collect();
            let cols = Tensor::from_vec(cols, (n, n_q, 1), &nn::device())?;
            out[g] = Some(lp.gather(&cols, D::Minus1)?.squeeze(D::Minus1)?);
        }
        let [rf, ac] = out;
        Ok((rf, ac))
    }

    /// Mean cross-entropy over loss-masked positions.
    pub fn loss(&self, batch: &[&TokenLayoutSequence]) -> Result<Tensor> {
        let (rf, ac) = self.target_log_probs(batch)?;
        let mut total: Option<Tensor> = None;
        let mut count = 0usize;
        for lp in [rf, ac].into_iter().flatten() {
            count += lp.elem_count();
            let s = lp.sum_all()?;
            total = Some(match total {
                Some(t) => (t + s)?,
                None => s,
            });
        }
        match total {
            Some(t) if count > 0 => Ok((t.neg()? / count as f64)?),
            _ => Err(Error::config("batch has no loss-masked positions")),
        }
    }

    /// Loss and gradients without updating parameters.
    pub fn loss_and_grads(&self, batch: &[&TokenLayoutSequence]) -> Result<(f32, candle_core::backprop::GradStore)> {
        let loss = self.loss(batch)?;
        let grads = loss.backward()?;
        Ok((loss.to_scalar::<f32>()?, grads))
    }

    pub fn train_step(&mut self, batch: &[&TokenLayoutSequence], opt: &mut AdamW) -> Result<f32> {
        let loss = self.loss(batch)?;
        opt.backward_step(&loss)?;
        self.steps += 1;
        Ok(loss.to_scalar::<f32>()?)
    }

    /// Chain-rule log-probability of a complete layout's outputs: the
    /// range factor once and every acoustic token, under the support used
    /// at inference without the end token.
    pub fn sequence_log_prob(&self, layout: &TokenLayoutSequence) -> Result<f64> {
        let (rf, ac) = self.target_log_probs(&[layout])?;
        let mut total = 0.0;
        if let Some(rf) = rf {
            total += rf.narrow(1, 0, 1)?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
        if let Some(ac) = ac {
            total += ac.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        }
        Ok(total)
    }

    /// Melody tokens for this model's pitch mode: decoupled melody, or raw
    /// F0 rounded and clamped to the vocabulary.
    pub fn melody_tokens(&self, f0: &crate::pitch::F0Sequence) -> Result<Vec<u32>> {
        let max = self.config.max_pitch;
        let m = if self.config.rescale_melody {
            crate::pitch::decompose_f0(f0, MELODY_MEAN_HZ)?.melody
        } else {
            crate::pitch::raw_pitch_tokens(f0)
        };
        Ok(m.into_iter().map(|v| v.min(max)).collect())
    }

    fn next_context(&self, tokens: &[u32], prompt: &PromptEmbedding) -> Result<Tensor> {
        let (x, pos) = self.embed(&[(tokens, prompt)])?;
        let h = self.global_forward_at(&x, &pos)?;
        let f = h.dims3()?.1;
        Ok(h.narrow(1, f - 1, 1)?.squeeze(1)?)
    }

    /// Support probabilities at codebook position `c` given earlier tokens.
    fn local_step(
        &self,
        ctx: &Tensor,
        partial: &[u32],
        head: Head,
        sampling: &SamplingConfig,
        greedy: bool,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let n_q = self.config.n_q;
        let c = partial.len();
        let mut ids = partial.to_vec();
        ids.resize(n_q, vocab::PAD);
        let hidden = self.local_forward(ctx, &self.local_embed(&ids)?)?;
        let logits = self.head_logits(head, &hidden)?.narrow(1, c, 1)?.flatten_all()?;
        let logits: Vec<f32> = (logits + self.support_mask(head, sampling.allow_eos)?)?.to_vec1()?;
        let mut support: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
        let temp = if greedy { 1.0 } else { sampling.temperature.max(1e-6) };
        if !greedy && sampling.top_k > 0 && sampling.top_k < support.len() {
            let mut by = support.clone();
            by.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            by.truncate(sampling.top_k);
            by.sort();
            support = by;
        }
        let max = support.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = support.iter().map(|&i| ((logits[i] as f64 - max) / temp).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok((support, w.into_iter().map(|v| v / z).collect()))
    }

    fn decode(
        &self,
        prefix: &TokenLayoutSequence,
        sampling: &SamplingConfig,
        choose: &mut Chooser<'_>,
    ) -> Result<Generation> {
        if !self.is_trained() {
            return Err(Error::Untrained(
                "transformer has no training steps; train or load a checkpoint first".into(),
            ));
        }
        prefix.validate(&self.vocab)?;
        if !prefix.is_inference_prefix() {
            return Err(Error::invalid("inference needs a prefix layout without acoustic units"));
        }
        let n_q = self.config.n_q;
        let t_len = prefix.segment(SegmentKind::Melody).map_or(0, |s| s.len);
        let mut tokens = prefix.tokens.clone();
        let mut step_probs = Vec::new();
        let mut range_factor = None;
        let mut pick = |ctx: &Tensor, position: usize, partial: &[u32], head: Head, greedy: bool, step: usize| -> Result<u32> {
            let (support, probs) = self.local_step(ctx, partial, head, sampling, greedy)?;
            let k = if greedy {
                probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, (i, &p)| if p > a.1 { (i, p) } else { a })
                    .0
            } else {
                choose(step, &probs)?
            };
            step_probs.push(probs[k]);
            let col = support[k];
            let position = position + partial.len();
            if col < N_SPECIALS {
                return Err(Error::Decoding {
                    position,
                    reason: format!("sampled special token {col} inside the output"),
                });
            }
            Ok((col - N_SPECIALS) as u32)
        };
        let mut step = 0;
        if self.config.use_range_factor {
            let ctx = self.next_context(&tokens, &prefix.prompt)?;
            let hz = pick(&ctx, tokens.len(), &[], Head::Range, sampling.greedy_range_factor, step)?;
            step += 1;
            range_factor = Some(hz);
            tokens.extend(std::iter::repeat_n(self.vocab.pitch(hz), n_q));
            tokens.extend(std::iter::repeat_n(vocab::SEP_RANGE, n_q));
        }
        let mut frames = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let mut partial: Vec<u32> = Vec::with_capacity(n_q);
            let mut frame = Vec::with_capacity(n_q);
            let ctx = self.next_context(&tokens, &prefix.prompt)?;
            for c in 0..n_q {
                let idx = pick(&ctx, tokens.len(), &partial, Head::Acoustic, sampling.greedy, step)?;
                step += 1;
                partial.push(self.vocab.acoustic(c, idx));
                frame.push(idx);
            }
            tokens.extend(&partial);
            frames.push(frame);
        }
        Ok(Generation {
            range_factor,
            units: AcousticUnitSequence::new(n_q, self.config.codebook_size, frames)?,
            step_probs,
        })
    }

    /// Predicts the range factor (if the model uses one) and then `T`
    /// frames of acoustic units, `T` being the prefix's melody length.
    pub fn infer<R: Rng + ?Sized>(
        &self,
        prefix: &TokenLayoutSequence,
        sampling: &SamplingConfig,
        rng: &mut R,
    ) -> Result<Generation> {
        self.decode(prefix, sampling, &mut |_, probs| Ok(nn::sample_index(&probs.iter().map(|&p| p as f32).collect::<Vec<_>>(), rng)))
    }

    /// Runs the incremental decoder while forcing the given outputs, and
    /// returns the probability of each forced token.
    pub fn forced_step_probs(
        &self,
        prefix: &TokenLayoutSequence,
        range_factor: Option<u32>,
        units: &AcousticUnitSequence,
        sampling: &SamplingConfig,
    ) -> Result<Vec<f64>> {
        let mut wanted: Vec<usize> = Vec::new();
        if self.config.use_range_factor {
            let hz = range_factor.ok_or_else(|| Error::invalid("model predicts a range factor; one must be forced"))?;
            wanted.push(hz as usize);
        }
        wanted.extend(units.frames().iter().flatten().map(|&i| i as usize));
        let sampling = SamplingConfig {
            greedy: false,
            greedy_range_factor: false,
            top_k: 0,
            ..*sampling
        };
        let rf_lo = 1usize;
        let use_rf = self.config.use_range_factor;
        let gen = self.decode(prefix, &sampling, &mut |step, probs| {
            let target = wanted[step];
            // supports are contiguous: pitch 1..=max or codes 0..K (EOS first when allowed)
            let eos = usize::from(sampling.allow_eos);
            let base = if use_rf && step == 0 { rf_lo } else { 0 };
            let k = target - base + eos;
            if k >= probs.len() {
                return Err(Error::invalid(format!("forced token {target} at step {step} is outside the support")));
            }
            Ok(k)
        })?;
        Ok(gen.step_probs)
    }
}

fn add_block(p: &mut ParamStore, prefix: &str, d: usize, ff: usize, std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
    p.add(&format!("{prefix}.ln1.g"), &[d], Init::Ones, rng)?;
    p.add(&format!("{prefix}.ln1.b"), &[d], Init::Zeros, rng)?;
    p.add(&format!("{prefix}.qkv.w"), &[d, 3 * d], Init::Normal(std), rng)?;
    p.add(&format!("{prefix}.qkv.b"), &[3 * d], Init::Zeros, rng)?;
    p.add(&format!("{prefix}.out.w"), &[d, d], Init::Normal(std), rng)?;
    p.add(&format!("{prefix}.out.b"), &[d], Init::Zeros, rng)?;
    p.add(&format!("{prefix}.ln2.g"), &[d], Init::Ones, rng)?;
    p.add(&format!("{prefix}.ln2.b"), &[d], Init::Zeros, rng)?;
    p.add(&format!("{prefix}.ff1.w"), &[d, ff], Init::Normal(std), rng)?;
    p.add(&format!("{prefix}.ff1.b"), &[ff], Init::Zeros, rng)?;
    p.add(&format!("{prefix}.ff2.w"), &[ff, d], Init::Normal(std), rng)?;
    p.add(&format!("{prefix}.ff2.b"), &[d], Init::Zeros, rng)?;
    Ok(())
}

/// Constant `(vocab, 2 * n)` sinusoids of log2(hz / 230) on pitch tokens,
/// zero elsewhere, so nearby pitch values start with similar embeddings.
fn pitch_table(vocab: &Vocab, n: usize) -> Result<Tensor> {
    let width = (2 * n).max(1);
    let mut data = vec![0f32; vocab.size() * width];
    for hz in 1..=vocab.max_pitch {
        let row = vocab.pitch(hz) as usize;
        let x = (hz as f64 / MELODY_MEAN_HZ).log2();
        for j in 0..n {
            let w = std::f64::consts::FRAC_PI_4 * (1u64 << j) as f64;
            data[row * width + 2 * j] = (w * x).sin() as f32;
            data[row * width + 2 * j + 1] = (w * x).cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (vocab.size(), width), &nn::device())?)
}

/// Rotates the two halves of each head's vectors by position-dependent
/// angles; `x` is `(B, heads, L, dh)`, `cos`/`sin` are `(B, 1, L, dh/2)`.
fn rotate(x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
    let half = x.dim(3)? / 2;
    let (a, b) = (x.narrow(3, 0, half)?, x.narrow(3, half, half)?);
    let ra = (a.broadcast_mul(cos)? - b.broadcast_mul(sin)?)?;
    let rb = (a.broadcast_mul(sin)? + b.broadcast_mul(cos)?)?;
    Ok(Tensor::cat(&[&ra, &rb], 3)?)
}
