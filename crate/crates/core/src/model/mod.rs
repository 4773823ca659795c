//! Tiny causal attention model over `v ‖ x ‖ <think> z </think> <answer> y </answer> <eos>`.
//!
//! Pre-norm blocks (RMS normalisation without gain), learned positional
//! embeddings, multi-head causal self-attention and a ReLU feed-forward.
//! Every projection may carry a low-rank adapter `(A, B)` whose contribution
//! is `(α/r)·x·A·B`; with `B = 0` the adapted model equals the base model.

mod checkpoint;
mod decode;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decode::{
    attention_visual_mass, decode_many, greedy_decode, parse_generation, Decoder, StopReason, TracedOutput,
};
pub use forward::{forward_logits, sequence_logprob, Bound, Trainable};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::seeds;
use crate::vocab::{TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, EOS, THINK_CLOSE, THINK_OPEN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: Vocab::new().len(),
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            context: 256,
            lora_rank: 8,
            lora_alpha: 16.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.context == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// `(name, shape)` of every base tensor in storage order.
    pub fn base_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut out = vec![("embed".into(), vec![v, d]), ("pos".into(), vec![self.context, d])];
        for l in 0..self.n_layers {
            for p in Proj::ALL {
                let (i, o) = p.dims(d, f);
                out.push((format!("layer{l}.{}", p.name()), vec![i, o]));
            }
        }
        out.push(("head".into(), vec![d, v]));
        out
    }

    pub fn adapter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f, r) = (self.d_model, self.d_ff, self.lora_rank);
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for p in Proj::ALL {
                let (i, o) = p.dims(d, f);
                out.push((format!("layer{l}.{}.lora_a", p.name()), vec![i, r]));
                out.push((format!("layer{l}.{}.lora_b", p.name()), vec![r, o]));
            }
        }
        out
    }
}

/// Projections inside one block, in storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 6] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Up, Proj::Down];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }

    fn dims(self, d: usize, f: usize) -> (usize, usize) {
        match self {
            Proj::Up => (d, f),
            Proj::Down => (f, d),
            _ => (d, d),
        }
    }

    fn offset(self) -> usize {
        self as usize
    }
}

pub(crate) fn base_index(layer: usize, p: Proj) -> usize {
    2 + layer * Proj::ALL.len() + p.offset()
}

pub(crate) fn adapter_index(layer: usize, p: Proj) -> (usize, usize) {
    let a = 2 * (layer * Proj::ALL.len() + p.offset());
    (a, a + 1)
}

/// Model weights: base tensors plus optional low-rank adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub base: Vec<Tensor>,
    pub adapters: Option<Vec<Tensor>>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let base = config.base_layout().into_iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Ok(Self {
            config,
            base,
            adapters: None,
        })
    }

    /// Gaussian initialisation scaled by fan-in; output projections are shrunk by depth.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seed, "model-init", 0);
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let base = config
            .base_layout()
            .into_iter()
            .map(|(name, shape)| {
                let std = if name == "embed" || name == "pos" {
                    0.5
                } else {
                    let s = 1.0 / (shape[0] as f64).sqrt();
                    if name.ends_with(".wo") || name.ends_with(".down") {
                        s * depth_scale
                    } else {
                        s
                    }
                };
                gaussian(&mut rng, shape, std)
            })
            .collect();
        Ok(Self {
            config,
            base,
            adapters: None,
        })
    }

    /// Attaches fresh adapters: `A` Gaussian, `B` zero.
    pub fn with_adapters(mut self, seed: u64) -> Result<Self> {
        if self.config.lora_rank == 0 {
            return Err(Error::invalid("adapter rank must be at least 1"));
        }
        let mut rng = seeds::rng(seed, "adapter-init", 0);
        let adapters = self
            .config
            .adapter_layout()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("lora_a") {
                    let std = 1.0 / (shape[0] as f64).sqrt();
                    gaussian(&mut rng, shape, std)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        self.adapters = Some(adapters);
        Ok(self)
    }

    /// Folds adapters into the base weights: `W + (α/r)·A·B`.
    pub fn merged(&self) -> Self {
        let mut base = self.base.clone();
        if let Some(ad) = &self.adapters {
            let s = self.config.lora_scale();
            let r = self.config.lora_rank;
            for l in 0..self.config.n_layers {
                for p in Proj::ALL {
                    let (ia, ib) = adapter_index(l, p);
                    let (din, dout) = p.dims(self.config.d_model, self.config.d_ff);
                    let mut delta = vec![0.0; din * dout];
                    kernels::matmul(ad[ia].data(), ad[ib].data(), din, r, dout, &mut delta);
                    for (w, dv) in base[base_index(l, p)].data_mut().iter_mut().zip(&delta) {
                        *w += s * dv;
                    }
                }
            }
        }
        Self {
            config: self.config.clone(),
            base,
            adapters: None,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .config
            .base_layout()
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.base)
            .collect();
        if let Some(ad) = &self.adapters {
            out.extend(self.config.adapter_layout().into_iter().map(|(n, _)| n).zip(ad));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.base.iter().chain(self.adapters.iter().flatten()).all(Tensor::all_finite)
    }

    /// Hex digest of every stored weight, in storage order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in self.base.iter().chain(self.adapters.iter().flatten()) {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn gaussian(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("numel matches")
}

/// Token layout of one full training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    /// Length of `v ‖ x`; the continuation starts here.
    pub prefix_len: usize,
    /// Number of continuation tokens in the reasoning part `<think> z </think>`.
    pub z_len: usize,
}

impl Sequence {
    pub fn continuation_len(&self) -> usize {
        self.tokens.len() - self.prefix_len
    }
}

/// Reasoning part `<think> z </think>` of a continuation.
pub fn think_part<S: AsRef<str>>(z: &[S]) -> Vec<String> {
    let mut out = vec![THINK_OPEN.to_string()];
    out.extend(z.iter().map(|s| s.as_ref().to_string()));
    out.push(THINK_CLOSE.to_string());
    out
}

/// Answer part `<answer> y </answer> <eos>` of a continuation.
pub fn answer_part<S: AsRef<str>>(y: &[S]) -> Vec<String> {
    let mut out = vec![ANSWER_OPEN.to_string()];
    out.extend(y.iter().map(|s| s.as_ref().to_string()));
    out.push(ANSWER_CLOSE.to_string());
    out.push(EOS.to_string());
    out
}

pub fn build_sequence<S: AsRef<str>>(vocab: &Vocab, v: &[S], x: &[S], z: &[S], y: &[S]) -> Result<Sequence> {
    let mut tokens = vocab.encode(v)?;
    tokens.extend(vocab.encode(x)?);
    let prefix_len = tokens.len();
    let think = think_part(z);
    tokens.extend(vocab.encode(&think)?);
    tokens.extend(vocab.encode(&answer_part(y))?);
    Ok(Sequence {
        tokens,
        prefix_len,
        z_len: think.len(),
    })
}
