use std::borrow::Cow;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::forward::RMS_EPS;
use super::{base_index, ModelParams, Proj};
use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab, ANSWER_CLOSE, ANSWER_OPEN, EOS, THINK_CLOSE, THINK_OPEN};

/// Incremental single-sequence evaluator with a key/value cache.
///
/// Adapters are merged into the base weights on construction, so the
/// evaluator sees exactly the effective weights of the tape forward pass.
pub struct Decoder<'a> {
    params: Cow<'a, ModelParams>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(params: &'a ModelParams) -> Result<Self> {
        params.config.validate()?;
        let params = if params.adapters.is_some() {
            Cow::Owned(params.merged())
        } else {
            Cow::Borrowed(params)
        };
        let n = params.config.n_layers;
        Ok(Self {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn reset(&mut self) {
        self.keys.iter_mut().chain(self.values.iter_mut()).for_each(Vec::clear);
        self.len = 0;
    }

    /// Appends `token` and returns the next-token logits together with this
    /// position's attention rows, indexed `[layer * heads + head][key position]`.
    pub fn step(&mut self, token: TokenId) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let cfg = &self.params.config;
        if token >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                id: token,
                vocab: cfg.vocab_size,
            });
        }
        if self.len >= cfg.context {
            return Err(Error::ContextOverflow {
                len: self.len + 1,
                limit: cfg.context,
            });
        }
        let (d, f, nh, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.head_dim());
        let w = &self.params.base;
        let t = self.len;
        let mut x: Vec<f64> = w[0].row(token).iter().zip(w[1].row(t)).map(|(a, b)| a + b).collect();
        let mut h = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut kv = vec![0.0; d];
        let mut att_out = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut up = vec![0.0; f];
        let mut rows = Vec::with_capacity(cfg.n_layers * nh);
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            kernels::rms_norm_row(&x, RMS_EPS, &mut h);
            kernels::matmul(&h, w[base_index(l, Proj::Q)].data(), 1, d, d, &mut q);
            kernels::matmul(&h, w[base_index(l, Proj::K)].data(), 1, d, d, &mut kv);
            self.keys[l].extend_from_slice(&kv);
            kernels::matmul(&h, w[base_index(l, Proj::V)].data(), 1, d, d, &mut kv);
            self.values[l].extend_from_slice(&kv);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            for hd in 0..nh {
                let qh = &q[hd * dh..(hd + 1) * dh];
                let mut scores: Vec<f64> = (0..=t)
                    .map(|j| kernels::dot(qh, &keys[j * d + hd * dh..j * d + (hd + 1) * dh]) * inv_sqrt)
                    .collect();
                kernels::softmax_prefix(&mut scores, t + 1);
                let o = &mut att_out[hd * dh..(hd + 1) * dh];
                o.iter_mut().for_each(|v| *v = 0.0);
                for (j, &a) in scores.iter().enumerate() {
                    let vj = &values[j * d + hd * dh..j * d + (hd + 1) * dh];
                    for (ov, vv) in o.iter_mut().zip(vj) {
                        *ov += a * vv;
                    }
                }
                rows.push(scores);
            }
            kernels::matmul(&att_out, w[base_index(l, Proj::O)].data(), 1, d, d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
            kernels::rms_norm_row(&x, RMS_EPS, &mut h);
            kernels::matmul(&h, w[base_index(l, Proj::Up)].data(), 1, d, f, &mut up);
            up.iter_mut().for_each(|v| *v = v.max(0.0));
            kernels::matmul(&up, w[base_index(l, Proj::Down)].data(), 1, f, d, &mut proj);
            x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        kernels::rms_norm_row(&x, RMS_EPS, &mut h);
        let v = cfg.vocab_size;
        let mut logits = vec![0.0; v];
        kernels::matmul(&h, w.last().expect("head tensor").data(), 1, d, v, &mut logits);
        self.len += 1;
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite { op: "decode" });
        }
        Ok((logits, rows))
    }

    /// Feeds `tokens` and returns the log-probability each assigns to its successor
    /// from position `start` on, i.e. `log p(tokens[i] | tokens[..i])` for `i ≥ start`.
    pub fn score(&mut self, tokens: &[TokenId], start: usize) -> Result<Vec<f64>> {
        if start == 0 || start >= tokens.len() {
            return Err(Error::Empty("continuation must be non-empty and follow a non-empty prefix".into()));
        }
        self.reset();
        let mut out = Vec::with_capacity(tokens.len() - start);
        let mut lp = vec![0.0; self.params.config.vocab_size];
        for i in 0..tokens.len() - 1 {
            let (logits, _) = self.step(tokens[i])?;
            if i + 1 >= start {
                kernels::log_softmax_row(&logits, &mut lp);
                out.push(lp[tokens[i + 1]]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EndToken,
    MaxLen,
    Context,
}

/// A parsed greedy generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracedOutput {
    /// Emitted tokens in order, including a final `<eos>` when one was produced.
    pub raw: Vec<String>,
    pub z: Vec<String>,
    pub y: Vec<String>,
    pub token_logprobs: Vec<f64>,
    /// Per emitted token: attention rows `[layer * heads + head][key position]`
    /// of the query that produced it.
    #[serde(skip)]
    pub attention: Vec<Vec<Vec<f64>>>,
    pub prefix_len: usize,
    pub malformed: bool,
    pub stop: StopReason,
}

fn is_tag(w: &str) -> bool {
    matches!(w, THINK_OPEN | THINK_CLOSE | ANSWER_OPEN | ANSWER_CLOSE | EOS)
}

/// Splits `<think> z </think> <answer> y </answer> [<eos>]` into `(z, y, malformed)`.
///
/// Anything else is malformed: `z` is empty and `y` is the whole text.
pub fn parse_generation<S: AsRef<str>>(raw: &[S]) -> (Vec<String>, Vec<String>, bool) {
    let mut words: Vec<&str> = raw.iter().map(AsRef::as_ref).collect();
    if words.last() == Some(&EOS) {
        words.pop();
    }
    let parsed = (|| {
        let close = words.iter().position(|w| *w == THINK_CLOSE)?;
        let ok = words.len() >= 4
            && words[0] == THINK_OPEN
            && words.get(close + 1) == Some(&ANSWER_OPEN)
            && words[words.len() - 1] == ANSWER_CLOSE
            && close + 2 < words.len();
        if !ok {
            return None;
        }
        let z = &words[1..close];
        let y = &words[close + 2..words.len() - 1];
        if z.iter().chain(y).any(|w| is_tag(w)) {
            return None;
        }
        Some((z.iter().map(|s| s.to_string()).collect(), y.iter().map(|s| s.to_string()).collect()))
    })();
    match parsed {
        Some((z, y)) => (z, y, false),
        None => (Vec::new(), words.iter().map(|s| s.to_string()).collect(), true),
    }
}

/// Argmax with ties resolved to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `v ‖ x` for at most `max_len` new tokens.
pub fn greedy_decode<S: AsRef<str>>(
    params: &ModelParams,
    vocab: &Vocab,
    v: &[S],
    x: &[S],
    max_len: usize,
) -> Result<TracedOutput> {
    if max_len < 4 {
        return Err(Error::invalid(format!("max_len {max_len} leaves no room for both tag pairs")));
    }
    let mut prefix = vocab.encode(v)?;
    prefix.extend(vocab.encode(x)?);
    if prefix.is_empty() {
        return Err(Error::Empty("decoding needs a non-empty prefix".into()));
    }
    let eos = vocab.id(EOS)?;
    let mut dec = Decoder::new(params)?;
    let context = params.config.context;
    let mut last = None;
    for &t in &prefix {
        last = Some(dec.step(t)?);
    }
    let (mut logits, mut rows) = last.expect("non-empty prefix");
    let mut raw = Vec::new();
    let mut token_logprobs = Vec::new();
    let mut attention = Vec::new();
    let mut lp = vec![0.0; logits.len()];
    let stop = loop {
        let next = argmax(&logits);
        kernels::log_softmax_row(&logits, &mut lp);
        raw.push(vocab.word(next)?.to_string());
        token_logprobs.push(lp[next]);
        attention.push(std::mem::take(&mut rows));
        if next == eos {
            break StopReason::EndToken;
        }
        if raw.len() >= max_len {
            break StopReason::MaxLen;
        }
        if dec.len() >= context {
            break StopReason::Context;
        }
        (logits, rows) = dec.step(next)?;
    };
    let (z, y, malformed) = parse_generation(&raw);
    Ok(TracedOutput {
        raw,
        z,
        y,
        token_logprobs,
        attention,
        prefix_len: prefix.len(),
        malformed,
        stop,
    })
}

/// Mean attention mass on `visual` over generated positions, layers and heads.
pub fn attention_visual_mass(traced: &TracedOutput, visual: Range<usize>) -> Result<f64> {
    if traced.attention.is_empty() {
        return Err(Error::Empty("no generated positions with attention records".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for step in &traced.attention {
        for row in step {
            let hi = visual.end.min(row.len());
            let lo = visual.start.min(hi);
            total += row[lo..hi].iter().sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("attention records are empty".into()));
    }
    Ok(total / count as f64)
}

/// Decodes every `(v, x)` pair in parallel and maps each trace through `f`;
/// output order equals input order.
pub fn decode_many<S, R, F>(params: &ModelParams, vocab: &Vocab, inputs: &[(&[S], &[S])], max_len: usize, f: F) -> Result<Vec<R>>
where
    S: AsRef<str> + Sync,
    R: Send,
    F: Fn(usize, TracedOutput) -> Result<R> + Sync,
{
    use rayon::prelude::*;
    let merged = params.merged();
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, (v, x))| f(i, greedy_decode(&merged, vocab, v, x, max_len)?))
        .collect()
}
