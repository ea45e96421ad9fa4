//! Minimal parameter store and layers on top of candle.
//!
//! Parameters live in a name-sorted map and are initialised from a ChaCha
//! stream, so two stores built from the same seed are bit-identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} defined twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng) as f32).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set(&self, name: &str, data: &[f32]) -> Result<()> {
        let var = self.get(name)?;
        if var.elem_count() != data.len() {
            return Err(Error::data(format!(
                "parameter {name} has {} values, got {}",
                var.elem_count(),
                data.len()
            )));
        }
        var.set(&Tensor::from_slice(data, var.shape(), &device())?)?;
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in flat(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

pub fn flat(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

/// `x @ w + b` over the last dimension of `x`; `w` is `(in, out)`.
/// `x @ w + b` over the last axis. Leading axes are flattened so the product
/// is a single 2-D matmul.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (rows, inner) = (dims[..dims.len() - 1].iter().product::<usize>(), dims[dims.len() - 1]);
    let mut out_dims = dims[..dims.len() - 1].to_vec();
    out_dims.push(w.dim(1)?);
    let y = x.reshape((rows, inner))?.matmul(w)?.reshape(out_dims)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(y.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// `(n, n)` additive mask: 0 on and below the diagonal, -inf above.
pub fn causal_mask(n: usize) -> Result<Tensor> {
    let data: Vec<f32> = (0..n)
        .flat_map(|i| (0..n).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (n, n), &device())?)
}

/// Sinusoidal position table, `(n, d)`.
pub fn sinusoidal(n: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0f32; n * d];
    for p in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let a = p as f64 * freq;
            data[p * d + 2 * i] = a.sin() as f32;
            data[p * d + 2 * i + 1] = a.cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (n, d), &device())?)
}

/// `f(p * theta_i)` for rotary encodings, `(n, dh / 2)`.
pub fn rotary_table(n: usize, dh: usize, f: fn(f64) -> f64) -> Result<Tensor> {
    let half = dh / 2;
    let mut data = vec![0f32; n * half];
    for p in 0..n {
        for i in 0..half {
            let theta = 1.0 / 10000f64.powf(2.0 * i as f64 / dh as f64);
            data[p * half + i] = f(p as f64 * theta) as f32;
        }
    }
    Ok(Tensor::from_vec(data, (n, half), &device())?)
}

/// Fresh seeded stream for parameter initialisation.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Index sampled from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f32], rng: &mut R) -> usize {
    let total: f32 = probs.iter().sum();
    let mut u = rng.random::<f32>() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
