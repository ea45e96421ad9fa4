//! Residual vector quantization with k-means initialisation and EMA updates.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `size x dim` table of codewords, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Codebook {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "codebook of {} values is not a non-empty multiple of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn size(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn codeword(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the nearest codeword (squared Euclidean) and its distance.
    /// Ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for (i, cw) in self.data.chunks_exact(self.dim).enumerate() {
            let d: f32 = cw.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

fn energy(x: &[f32]) -> f32 {
    x.iter().map(|v| v * v).sum()
}

/// Greedy residual quantization of `feature` through `codebooks`.
///
/// Returns the chosen index per stage and the residual energy after each
/// stage; the trace is non-increasing.
pub fn rvq_quantize(feature: &[f32], codebooks: &[Codebook]) -> Result<(Vec<usize>, Vec<f32>)> {
    if codebooks.is_empty() {
        return Err(Error::invalid("no codebooks"));
    }
    let mut residual = feature.to_vec();
    let mut indices = Vec::with_capacity(codebooks.len());
    let mut trace = Vec::with_capacity(codebooks.len());
    for (stage, cb) in codebooks.iter().enumerate() {
        if cb.dim != feature.len() {
            return Err(Error::invalid(format!(
                "stage {stage} codebook dim {} != feature dim {}",
                cb.dim,
                feature.len()
            )));
        }
        let before = energy(&residual);
        let (i, _) = cb.nearest(&residual);
        let mut next: Vec<f32> = residual.iter().zip(cb.codeword(i)).map(|(r, c)| r - c).collect();
        // Rounding can make the subtraction marginally worse than keeping the
        // residual; only possible when the nearest codeword is ~zero.
        if energy(&next) > before {
            next.clone_from(&residual);
        }
        residual = next;
        indices.push(i);
        trace.push(energy(&residual));
    }
    Ok((indices, trace))
}

/// Sum of the selected codewords of the first `indices.len()` stages.
pub fn rvq_reconstruct(indices: &[usize], codebooks: &[Codebook]) -> Vec<f32> {
    let dim = codebooks[0].dim;
    let mut out = vec![0.0f32; dim];
    for (&i, cb) in indices.iter().zip(codebooks) {
        for (o, c) in out.iter_mut().zip(cb.codeword(i)) {
            *o += c;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqTrainConfig {
    pub epochs: usize,
    /// EMA decay of codeword statistics.
    pub decay: f32,
    /// Codewords whose EMA count falls below this are restarted from data.
    pub dead_threshold: f32,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            decay: 0.8,
            dead_threshold: 0.5,
        }
    }
}

/// Mean squared residual after the first `levels` stages.
pub fn mean_residual(data: &[Vec<f32>], codebooks: &[Codebook], levels: usize) -> f32 {
    if data.is_empty() {
        return 0.0;
    }
    let cbs = &codebooks[..levels.min(codebooks.len())];
    let total: f64 = data
        .iter()
        .map(|x| {
            let (_, trace) = rvq_quantize(x, cbs).expect("validated dims");
            *trace.last().unwrap() as f64
        })
        .sum();
    (total / data.len() as f64) as f32
}

/// Initial codebooks: each stage samples `size` residuals of the previous
/// stages without replacement.
pub fn init_codebooks<R: Rng + ?Sized>(
    data: &[Vec<f32>],
    levels: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Codebook>> {
    let dim = data.first().map(Vec::len).ok_or_else(|| Error::config("no training vectors"))?;
    let mut residuals: Vec<Vec<f32>> = data.to_vec();
    let mut books = Vec::with_capacity(levels);
    for _ in 0..levels {
        let picks: Vec<usize> = if residuals.len() >= size {
            sample(rng, residuals.len(), size).into_vec()
        } else {
            (0..size).map(|_| rng.random_range(0..residuals.len())).collect()
        };
        let flat: Vec<f32> = picks.iter().flat_map(|&i| residuals[i].iter().copied()).collect();
        let cb = Codebook::new(dim, flat)?;
        for r in residuals.iter_mut() {
            let (i, _) = cb.nearest(r);
            for (v, c) in r.iter_mut().zip(cb.codeword(i)) {
                *v -= c;
            }
        }
        books.push(cb);
    }
    Ok(books)
}

/// One EMA pass over `data` for every stage, restarting dead codewords from
/// that stage's residuals.
pub fn ema_epoch<R: Rng + ?Sized>(
    data: &[Vec<f32>],
    books: &mut [Codebook],
    counts: &mut [Vec<f32>],
    sums: &mut [Vec<f32>],
    cfg: &RvqTrainConfig,
    rng: &mut R,
) {
    let dim = books[0].dim;
    let levels = books.len();
    let mut batch_counts: Vec<Vec<f32>> = books.iter().map(|b| vec![0.0; b.size()]).collect();
    let mut batch_sums: Vec<Vec<f32>> = books.iter().map(|b| vec![0.0; b.data.len()]).collect();
    let mut stage_inputs: Vec<Vec<Vec<f32>>> = vec![Vec::with_capacity(data.len()); levels];
    for x in data {
        let mut r = x.clone();
        for l in 0..levels {
            let (i, _) = books[l].nearest(&r);
            batch_counts[l][i] += 1.0;
            for (s, v) in batch_sums[l][i * dim..(i + 1) * dim].iter_mut().zip(&r) {
                *s += v;
            }
            stage_inputs[l].push(r.clone());
            for (v, c) in r.iter_mut().zip(books[l].codeword(i)) {
                *v -= c;
            }
        }
    }
    let g = cfg.decay;
    for l in 0..levels {
        let k = books[l].size();
        for i in 0..k {
            counts[l][i] = g * counts[l][i] + (1.0 - g) * batch_counts[l][i];
            for d in 0..dim {
                let j = i * dim + d;
                sums[l][j] = g * sums[l][j] + (1.0 - g) * batch_sums[l][j];
            }
            if counts[l][i] < cfg.dead_threshold && !stage_inputs[l].is_empty() {
                let pick = &stage_inputs[l][rng.random_range(0..stage_inputs[l].len())];
                books[l].data[i * dim..(i + 1) * dim].copy_from_slice(pick);
                counts[l][i] = 1.0;
                sums[l][i * dim..(i + 1) * dim].copy_from_slice(pick);
            } else if counts[l][i] > 0.0 {
                for d in 0..dim {
                    books[l].data[i * dim + d] = sums[l][i * dim + d] / counts[l][i];
                }
            }
        }
    }
}
