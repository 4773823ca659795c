use super::{adapter_index, base_index, ModelConfig, ModelParams, Proj, Sequence};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::vocab::TokenId;

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Which tensors become differentiable leaves when parameters are bound to a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Model parameters bound as leaves on one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    pub config: ModelConfig,
    pub base: Vec<Var>,
    pub adapters: Option<Vec<Var>>,
}

impl Bound {
    pub fn new(g: &mut Graph, params: &ModelParams, trainable: Trainable) -> Result<Self> {
        let leaf = |g: &mut Graph, t: &Tensor, grad: bool| if grad { g.param(t.clone()) } else { g.constant(t.clone()) };
        let base = params
            .base
            .iter()
            .map(|t| leaf(g, t, trainable == Trainable::Base))
            .collect::<Result<Vec<_>>>()?;
        let adapters = match &params.adapters {
            Some(ad) => Some(
                ad.iter()
                    .map(|t| leaf(g, t, trainable == Trainable::Adapters))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None if trainable == Trainable::Adapters => {
                return Err(Error::invalid("adapters requested but the model has none"))
            }
            None => None,
        };
        Ok(Self {
            config: params.config.clone(),
            base,
            adapters,
        })
    }

    /// Leaves that receive gradients, in storage order.
    pub fn trainable_vars(&self, trainable: Trainable) -> Vec<Var> {
        match trainable {
            Trainable::Nothing => Vec::new(),
            Trainable::Base => self.base.clone(),
            Trainable::Adapters => self.adapters.clone().unwrap_or_default(),
        }
    }

    fn proj(&self, g: &mut Graph, layer: usize, p: Proj, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.base[base_index(layer, p)])?;
        match &self.adapters {
            Some(ad) => {
                let (ia, ib) = adapter_index(layer, p);
                let xa = g.matmul(x, ad[ia])?;
                let xab = g.matmul(xa, ad[ib])?;
                let xab = g.scale(xab, self.config.lora_scale())?;
                g.add(y, xab)
            }
            None => Ok(y),
        }
    }

    /// Final normalised hidden states, one row per token.
    pub fn hidden(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<Var> {
        check_tokens(&self.config, tokens)?;
        let cfg = &self.config;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.gather_rows(self.base[0], tokens)?;
        let pos = g.gather_rows(self.base[1], &positions)?;
        let mut x = g.add(tok, pos)?;
        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in 0..cfg.n_layers {
            let h = g.rms_norm(x, RMS_EPS)?;
            let q = self.proj(g, l, Proj::Q, h)?;
            let k = self.proj(g, l, Proj::K, h)?;
            let v = self.proj(g, l, Proj::V, h)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = g.slice_cols(q, hd * dh, dh)?;
                let kh = g.slice_cols(k, hd * dh, dh)?;
                let vh = g.slice_cols(v, hd * dh, dh)?;
                let s = g.matmul_nt(qh, kh)?;
                let s = g.scale(s, inv_sqrt)?;
                let a = g.causal_softmax(s)?;
                heads.push(g.matmul(a, vh)?);
            }
            let att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = self.proj(g, l, Proj::O, att)?;
            x = g.add(x, o)?;
            let h = g.rms_norm(x, RMS_EPS)?;
            let u = self.proj(g, l, Proj::Up, h)?;
            let u = g.relu(u)?;
            let d = self.proj(g, l, Proj::Down, u)?;
            x = g.add(x, d)?;
        }
        g.rms_norm(x, RMS_EPS)
    }

    /// Logits for the selected positions only.
    pub fn logits_at(&self, g: &mut Graph, tokens: &[TokenId], rows: &[usize]) -> Result<Var> {
        let h = self.hidden(g, tokens)?;
        let h = g.gather_rows(h, rows)?;
        g.matmul(h, *self.base.last().expect("head tensor"))
    }

    /// Log-softmax rows predicting `tokens[start..]`; row `i` predicts `tokens[start + i]`.
    fn continuation_log_softmax(&self, g: &mut Graph, tokens: &[TokenId], start: usize) -> Result<Var> {
        if start == 0 || start >= tokens.len() {
            return Err(Error::Empty(format!(
                "continuation must be non-empty and follow a non-empty prefix (start {start}, length {})",
                tokens.len()
            )));
        }
        let rows: Vec<usize> = (start - 1..tokens.len() - 1).collect();
        let logits = self.logits_at(g, tokens, &rows)?;
        g.log_softmax(logits)
    }

    /// Per-token log-probabilities of `tokens[start..]`, each conditioned on everything before it.
    pub fn token_logprobs(&self, g: &mut Graph, tokens: &[TokenId], start: usize) -> Result<Var> {
        let lp = self.continuation_log_softmax(g, tokens, start)?;
        let rows: Vec<usize> = (0..tokens.len() - start).collect();
        g.pick(lp, &rows, &tokens[start..])
    }

    /// `(log p(z-part), log p(z-part ‖ y-part))` of a full sequence from one pass.
    pub fn segment_logprobs(&self, g: &mut Graph, seq: &Sequence) -> Result<(Var, Var)> {
        let (start, n) = (seq.prefix_len, seq.continuation_len());
        if seq.z_len == 0 || seq.z_len >= n {
            return Err(Error::invalid("sequence needs non-empty reasoning and answer parts"));
        }
        let lp = self.continuation_log_softmax(g, &seq.tokens, start)?;
        let zr: Vec<usize> = (0..seq.z_len).collect();
        let yr: Vec<usize> = (seq.z_len..n).collect();
        let z = g.pick(lp, &zr, &seq.tokens[start..start + seq.z_len])?;
        let y = g.pick(lp, &yr, &seq.tokens[start + seq.z_len..])?;
        let lz = g.sum(z)?;
        let ly = g.sum(y)?;
        let lzy = g.add(lz, ly)?;
        Ok((lz, lzy))
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("empty token sequence".into()));
    }
    if tokens.len() > cfg.context {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            limit: cfg.context,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::UnknownToken {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Logits at every position, shape `[len, vocab]`.
pub fn forward_logits(params: &ModelParams, tokens: &[TokenId]) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params, Trainable::Nothing)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let l = b.logits_at(&mut g, tokens, &rows)?;
    Ok(g.value(l).clone())
}

/// `Σ_t log p(continuation_t | prefix, continuation_<t)`.
pub fn sequence_logprob(params: &ModelParams, prefix: &[TokenId], continuation: &[TokenId]) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::Empty("continuation must be non-empty".into()));
    }
    let mut g = Graph::new();
    let b = Bound::new(&mut g, params, Trainable::Nothing)?;
    let mut tokens = prefix.to_vec();
    tokens.extend_from_slice(continuation);
    let lp = b.token_logprobs(&mut g, &tokens, prefix.len())?;
    let s = g.sum(lp)?;
    Ok(g.item(s))
}
