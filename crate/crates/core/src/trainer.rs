//! Optimisation loops: biased base pretraining, adapter SFT and full-weight
//! contrastive preference tuning.
//!
//! Each batch computes per-record gradients in parallel, sums them in record
//! order and takes one Adam step, so results do not depend on the worker count.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::compression::SftRecord;
use crate::error::{Error, Result};
use crate::inducers::PreferenceRecord;
use crate::losses::{sft_loss_graph, total_loss_graph, LossBreakdown, LossWeights, RecordLogProbs};
use crate::model::{build_sequence, Bound, ModelParams, Sequence, Trainable};
use crate::seeds;
use crate::toy_world::PretrainRecord;
use crate::vocab::Vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Sft,
    Cpo,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Sft => "sft",
            Stage::Cpo => "cpo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Adapter rank and scale; read by the SFT stage only.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Preference weights; read by the CPO stage only.
    pub loss: LossWeights,
    pub max_grad_norm: f64,
    /// Where the frozen reference weights live; required for CPO.
    pub reference_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (learning_rate, batch_size, epochs) = match stage {
            Stage::Base => (3e-3, 16, 6),
            Stage::Sft => (2e-3, 32, 2),
            Stage::Cpo => (5e-4, 8, 2),
        };
        Self {
            stage,
            learning_rate,
            batch_size,
            epochs,
            seed: 0,
            lora_rank: 8,
            lora_alpha: 16.0,
            loss: LossWeights::default(),
            max_grad_norm: 1.0,
            reference_checkpoint: None,
        }
    }

    /// A learning rate of exactly 0 is accepted so that no-op runs can be checked.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid("max gradient norm must be positive"));
        }
        match self.stage {
            Stage::Sft if self.lora_rank == 0 || !(self.lora_alpha > 0.0) => {
                Err(Error::invalid("adapter rank and scale must be positive"))
            }
            Stage::Cpo if self.reference_checkpoint.is_none() => {
                Err(Error::invalid("preference tuning requires a reference checkpoint path"))
            }
            Stage::Cpo => self.loss.validate(),
            _ => Ok(()),
        }
    }
}

/// First- and second-moment optimiser with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    /// Record-weighted mean losses, one entry per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub log: Vec<LogEntry>,
    pub final_fingerprint: String,
    /// Fingerprint of the frozen reference, taken after training (CPO only).
    pub reference_fingerprint: Option<String>,
    /// Held-out preference accuracy after training (CPO only).
    pub preference_accuracy: Option<f64>,
    /// Kept out of serialised reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

fn trainable_tensors(params: &mut ModelParams, which: Trainable) -> &mut Vec<Tensor> {
    match which {
        Trainable::Adapters => params.adapters.as_mut().expect("checked before training"),
        _ => &mut params.base,
    }
}

fn add_into(acc: &mut [Tensor], g: &[Tensor]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
    }
}

fn collect_grads(g: &mut Graph, loss: Var, vars: &[Var]) -> Result<Vec<Tensor>> {
    let mut grads = g.backward(loss)?;
    vars.iter()
        .map(|&v| {
            grads
                .take(v)
                .ok_or_else(|| Error::invalid("trainable leaf received no gradient"))
        })
        .collect()
}

/// Shared epoch/batch loop. `record_step` returns one record's loss values and
/// gradients of its unnormalised loss with respect to the trainable tensors.
fn run_loop<F>(
    params: &mut ModelParams,
    which: Trainable,
    n: usize,
    cfg: &TrainConfig,
    record_step: F,
) -> Result<(Vec<LossBreakdown>, Vec<LogEntry>)>
where
    F: Fn(&ModelParams, usize) -> Result<(LossBreakdown, Vec<Tensor>)> + Sync,
{
    let mut adam = Adam::new(cfg.learning_rate, trainable_tensors(params, which));
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeds::rng(cfg.seed, "shuffle", epoch as u64));
        let mut epoch_sum = LossBreakdown::default();
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot: &ModelParams = params;
            let results: Vec<(LossBreakdown, Vec<Tensor>)> =
                chunk.par_iter().map(|&i| record_step(snapshot, i)).collect::<Result<_>>()?;
            let b = chunk.len() as f64;
            let mut iter = results.into_iter();
            let (first_loss, mut grads) = iter.next().expect("chunks are non-empty");
            let mut sum = first_loss;
            for (l, g) in iter {
                accumulate(&mut sum, &l, 1.0);
                add_into(&mut grads, &g);
            }
            for t in grads.iter_mut() {
                t.data_mut().iter_mut().for_each(|x| *x /= b);
            }
            if !grads.iter().all(Tensor::all_finite) {
                return Err(Error::NonFinite { op: "train step" });
            }
            clip_global_norm(&mut grads, cfg.max_grad_norm);
            adam.step(trainable_tensors(params, which), &grads)?;
            accumulate(&mut epoch_sum, &sum, 1.0);
            let mut mean = LossBreakdown::default();
            accumulate(&mut mean, &sum, 1.0 / b);
            log.push(LogEntry {
                epoch,
                batch,
                losses: mean,
            });
        }
        let mut mean = LossBreakdown::default();
        accumulate(&mut mean, &epoch_sum, 1.0 / n as f64);
        epochs.push(mean);
    }
    if !params.all_finite() {
        return Err(Error::NonFinite { op: "train" });
    }
    Ok((epochs, log))
}

fn accumulate(acc: &mut LossBreakdown, x: &LossBreakdown, w: f64) {
    acc.l_sft += w * x.l_sft;
    acc.l_re += w * x.l_re;
    acc.l_dpo += w * x.l_dpo;
    acc.l_anc += w * x.l_anc;
    acc.l_total += w * x.l_total;
}

/// Negative log-likelihood of `z ‖ y` for one encoded sequence.
fn nll_step(params: &ModelParams, which: Trainable, seq: &Sequence) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, which)?;
    let (lz, lzy) = bound.segment_logprobs(&mut g, seq)?;
    let ly = g.sub(lzy, lz)?;
    let loss = sft_loss_graph(&mut g, &[(lz, ly)])?;
    let value = g.item(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "sequence loss" });
    }
    let vars = bound.trainable_vars(which);
    let grads = collect_grads(&mut g, loss, &vars)?;
    Ok((
        LossBreakdown {
            l_sft: value,
            l_total: value,
            ..LossBreakdown::default()
        },
        grads,
    ))
}

fn encode_all<'a, I>(vocab: &Vocab, parts: I) -> Result<Vec<Sequence>>
where
    I: Iterator<Item = [&'a [String]; 4]>,
{
    parts.map(|[v, x, z, y]| build_sequence(vocab, v, x, z, y)).collect()
}

fn finish(stage: Stage, params: &ModelParams, epochs: Vec<LossBreakdown>, log: Vec<LogEntry>, start: Instant) -> TrainReport {
    TrainReport {
        stage,
        epochs,
        log,
        final_fingerprint: params.fingerprint(),
        reference_fingerprint: None,
        preference_accuracy: None,
        wall_time_secs: start.elapsed().as_secs_f64(),
    }
}

/// Full-weight maximum-likelihood training on the biased caption corpus.
pub fn train_base(
    params: &ModelParams,
    vocab: &Vocab,
    records: &[PretrainRecord],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("empty pretraining corpus".into()));
    }
    if params.adapters.is_some() {
        return Err(Error::invalid("base pretraining expects a model without adapters"));
    }
    let start = Instant::now();
    let seqs = encode_all(vocab, records.iter().map(|r| [&r.v[..], &r.x[..], &r.z[..], &r.y[..]]))?;
    let mut out = params.clone();
    let (epochs, log) = run_loop(&mut out, Trainable::Base, seqs.len(), cfg, |p, i| {
        nll_step(p, Trainable::Base, &seqs[i])
    })?;
    let report = finish(Stage::Base, &out, epochs, log, start);
    Ok((out, report))
}

/// Adapter-only supervised tuning on pruned chains. Adapters are attached
/// with the configured rank and scale when the model has none.
pub fn train_sft(
    params: &ModelParams,
    vocab: &Vocab,
    records: &[SftRecord],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("empty supervised dataset".into()));
    }
    let start = Instant::now();
    let mut out = params.clone();
    if out.adapters.is_none() {
        out.config.lora_rank = cfg.lora_rank;
        out.config.lora_alpha = cfg.lora_alpha;
        out = out.with_adapters(seeds::derive(cfg.seed, "adapters", 0))?;
    } else if out.config.lora_rank != cfg.lora_rank {
        return Err(Error::invalid(format!(
            "model carries rank-{} adapters but the config asks for rank {}",
            out.config.lora_rank, cfg.lora_rank
        )));
    }
    let seqs = encode_all(vocab, records.iter().map(|r| [&r.v[..], &r.x[..], &r.z_pruned[..], &r.y[..]]))?;
    let (epochs, log) = run_loop(&mut out, Trainable::Adapters, seqs.len(), cfg, |p, i| {
        nll_step(p, Trainable::Adapters, &seqs[i])
    })?;
    let report = finish(Stage::Sft, &out, epochs, log, start);
    Ok((out, report))
}

/// Positive sequence followed by the gen, img and ins negatives.
fn preference_sequences(vocab: &Vocab, r: &PreferenceRecord) -> Result<[Sequence; 4]> {
    let [g, i, n] = r.negatives();
    Ok([
        build_sequence(vocab, &r.v, &r.x, &r.pos_z, &r.pos_y)?,
        build_sequence(vocab, &r.v, &r.x, g.0, g.1)?,
        build_sequence(vocab, &r.v, &r.x, i.0, i.1)?,
        build_sequence(vocab, &r.v, &r.x, n.0, n.1)?,
    ])
}

fn record_logprobs(g: &mut Graph, bound: &Bound, seqs: &[Sequence; 4]) -> Result<RecordLogProbs<Var>> {
    let mut lps = Vec::with_capacity(4);
    for s in seqs {
        lps.push(bound.segment_logprobs(g, s)?);
    }
    Ok(RecordLogProbs {
        pos_z: lps[0].0,
        pos_zy: lps[0].1,
        neg_z: lps[1..].iter().map(|p| p.0).collect(),
        neg_zy: lps[1..].iter().map(|p| p.1).collect(),
    })
}

/// Reference log-probabilities of one record under frozen weights.
pub fn reference_logprobs(reference: &ModelParams, seqs: &[Sequence; 4]) -> Result<RecordLogProbs<f64>> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, reference, Trainable::Nothing)?;
    let lp = record_logprobs(&mut g, &bound, seqs)?;
    Ok(RecordLogProbs {
        pos_z: g.item(lp.pos_z),
        pos_zy: g.item(lp.pos_zy),
        neg_z: lp.neg_z.iter().map(|&v| g.item(v)).collect(),
        neg_zy: lp.neg_zy.iter().map(|&v| g.item(v)).collect(),
    })
}

/// Full-weight contrastive preference tuning against a frozen reference.
pub fn train_cpo(
    policy: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocab,
    records: &[PreferenceRecord],
    held_out: &[PreferenceRecord],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Empty("empty preference dataset".into()));
    }
    if policy.adapters.is_some() || reference.adapters.is_some() {
        return Err(Error::invalid("preference tuning runs on merged weights"));
    }
    if policy.fingerprint() != reference.fingerprint() {
        return Err(Error::invalid("the policy must start from the reference weights"));
    }
    let start = Instant::now();
    let ref_hash = reference.fingerprint();
    let seqs: Vec<[Sequence; 4]> = records
        .iter()
        .map(|r| preference_sequences(vocab, r))
        .collect::<Result<_>>()?;
    let mut out = policy.clone();
    let (epochs, log) = run_loop(&mut out, Trainable::Base, seqs.len(), cfg, |p, i| {
        let r = reference_logprobs(reference, &seqs[i])?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, p, Trainable::Base)?;
        let lp = record_logprobs(&mut g, &bound, &seqs[i])?;
        let vars = total_loss_graph(&mut g, &[lp], &[r], &cfg.loss)?;
        let values = vars.values(&g);
        if !values.l_total.is_finite() {
            return Err(Error::NonFinite { op: "preference loss" });
        }
        let trainable = bound.trainable_vars(Trainable::Base);
        Ok((values, collect_grads(&mut g, vars.total, &trainable)?))
    })?;
    if reference.fingerprint() != ref_hash {
        return Err(Error::invalid("reference weights changed during preference tuning"));
    }
    let mut report = finish(Stage::Cpo, &out, epochs, log, start);
    report.reference_fingerprint = Some(ref_hash);
    if !held_out.is_empty() {
        report.preference_accuracy = Some(preference_accuracy(&out, reference, vocab, held_out)?);
    }
    Ok((out, report))
}

/// Fraction of records whose positive reasoning reward beats all three negatives.
pub fn preference_accuracy(
    policy: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocab,
    records: &[PreferenceRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("no records to score".into()));
    }
    let wins: Vec<bool> = records
        .par_iter()
        .map(|r| {
            let seqs = preference_sequences(vocab, r)?;
            let p = reference_logprobs(policy, &seqs)?;
            let q = reference_logprobs(reference, &seqs)?;
            let pos = p.pos_z - q.pos_z;
            Ok(p.neg_z.iter().zip(&q.neg_z).all(|(a, b)| pos > a - b))
        })
        .collect::<Result<_>>()?;
    Ok(wins.iter().filter(|&&w| w).count() as f64 / records.len() as f64)
}
