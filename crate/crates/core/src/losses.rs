//! Supervised and contrastive preference objectives over sequence log-probabilities.
//!
//! Rewards are log-ratios `r = log p_θ − log p_ref`. Reference log-probabilities
//! enter as plain numbers, so no gradient can reach the reference model.
//! Every preference term has the form `−log σ(gap)`; negatives are summed and
//! records are averaged.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Negative labels in storage order.
pub const NEGATIVES: [&str; 3] = ["gen", "img", "ins"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta: f64,
    pub delta: f64,
    pub lambda_dpo: f64,
    pub lambda_anc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 0.0,
            lambda_dpo: 1.0,
            lambda_anc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        for (name, v) in [
            ("delta", self.delta),
            ("lambda_dpo", self.lambda_dpo),
            ("lambda_anc", self.lambda_anc),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

/// Log-probabilities of one preference record: the positive reasoning part,
/// the positive joint sequence, and the same pair for each negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordLogProbs<T> {
    pub pos_z: T,
    pub pos_zy: T,
    pub neg_z: Vec<T>,
    pub neg_zy: Vec<T>,
}

impl<T: Copy> RecordLogProbs<T> {
    fn check_negatives(&self) -> Result<()> {
        if self.neg_z.len() != NEGATIVES.len() || self.neg_zy.len() != NEGATIVES.len() {
            return Err(Error::invalid(format!(
                "expected exactly {} negatives, got {} reasoning and {} joint",
                NEGATIVES.len(),
                self.neg_z.len(),
                self.neg_zy.len()
            )));
        }
        Ok(())
    }

    fn values(&self) -> impl Iterator<Item = T> + '_ {
        [self.pos_z, self.pos_zy]
            .into_iter()
            .chain(self.neg_z.iter().copied())
            .chain(self.neg_zy.iter().copied())
    }
}

/// Policy and reference log-probabilities for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardInputs {
    pub policy: RecordLogProbs<f64>,
    pub reference: RecordLogProbs<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sft: f64,
    pub l_re: f64,
    pub l_dpo: f64,
    pub l_anc: f64,
    pub l_total: f64,
}

/// Graph nodes of the preference objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub re: Var,
    pub dpo: Var,
    pub anc: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_sft: 0.0,
            l_re: g.item(self.re),
            l_dpo: g.item(self.dpo),
            l_anc: g.item(self.anc),
            l_total: g.item(self.total),
        }
    }
}

/// `r_θ = policy − reference`.
pub fn reward_r(policy_lp: f64, reference_lp: f64) -> f64 {
    policy_lp - reference_lp
}

fn reward(g: &mut Graph, policy: Var, reference: f64) -> Result<Var> {
    g.add_scalar(policy, -reference)
}

fn neg_log_sigmoid(g: &mut Graph, x: Var) -> Result<Var> {
    let ls = g.log_sigmoid(x)?;
    g.scale(ls, -1.0)
}

fn batch_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let s = g.add_all(terms)?;
    g.scale(s, 1.0 / terms.len() as f64)
}

fn check_batch(policy: &[RecordLogProbs<Var>], reference: &[RecordLogProbs<f64>], w: &LossWeights) -> Result<()> {
    w.validate()?;
    if policy.is_empty() {
        return Err(Error::Empty("preference loss over an empty batch".into()));
    }
    if policy.len() != reference.len() {
        return Err(Error::invalid("policy and reference batches differ in length"));
    }
    for (p, r) in policy.iter().zip(reference) {
        p.check_negatives()?;
        r.check_negatives()?;
        if let Some(bad) = r.values().find(|v| !(*v <= 0.0)) {
            return Err(Error::invalid(format!("reference log-probability {bad} is positive")));
        }
    }
    Ok(())
}

fn check_policy_values(g: &Graph, policy: &[RecordLogProbs<Var>]) -> Result<()> {
    for p in policy {
        if let Some(bad) = p.values().map(|v| g.item(v)).find(|v| !(*v <= 0.0)) {
            return Err(Error::invalid(format!("policy log-probability {bad} is positive")));
        }
    }
    Ok(())
}

/// `Σ_l −log σ(β·r(pos) − β·r(neg_l))` for one record, on either reasoning or joint sequences.
fn contrast(g: &mut Graph, pos: (Var, f64), negs: &[(Var, f64)], beta: f64) -> Result<Var> {
    let rp = reward(g, pos.0, pos.1)?;
    let mut terms = Vec::with_capacity(negs.len());
    for &(n, nr) in negs {
        let rn = reward(g, n, nr)?;
        let gap = g.sub(rp, rn)?;
        let gap = g.scale(gap, beta)?;
        terms.push(neg_log_sigmoid(g, gap)?);
    }
    g.add_all(&terms)
}

/// Reasoning-level preference loss.
pub fn re_loss_graph(
    g: &mut Graph,
    policy: &[RecordLogProbs<Var>],
    reference: &[RecordLogProbs<f64>],
    w: &LossWeights,
) -> Result<Var> {
    check_batch(policy, reference, w)?;
    check_policy_values(g, policy)?;
    let mut per = Vec::with_capacity(policy.len());
    for (p, r) in policy.iter().zip(reference) {
        let negs: Vec<(Var, f64)> = p.neg_z.iter().copied().zip(r.neg_z.iter().copied()).collect();
        per.push(contrast(g, (p.pos_z, r.pos_z), &negs, w.beta)?);
    }
    batch_mean(g, &per)
}

/// Joint reasoning-and-answer preference loss.
pub fn dpo_loss_graph(
    g: &mut Graph,
    policy: &[RecordLogProbs<Var>],
    reference: &[RecordLogProbs<f64>],
    w: &LossWeights,
) -> Result<Var> {
    check_batch(policy, reference, w)?;
    check_policy_values(g, policy)?;
    let mut per = Vec::with_capacity(policy.len());
    for (p, r) in policy.iter().zip(reference) {
        let negs: Vec<(Var, f64)> = p.neg_zy.iter().copied().zip(r.neg_zy.iter().copied()).collect();
        per.push(contrast(g, (p.pos_zy, r.pos_zy), &negs, w.beta)?);
    }
    batch_mean(g, &per)
}

/// `−[log σ(β·r(pos_z) − δ) + λ_DPO·log σ(β·r(pos_zy) − δ)]`, batch-meaned.
pub fn anchor_loss_graph(
    g: &mut Graph,
    policy: &[RecordLogProbs<Var>],
    reference: &[RecordLogProbs<f64>],
    w: &LossWeights,
) -> Result<Var> {
    check_batch(policy, reference, w)?;
    check_policy_values(g, policy)?;
    let mut per = Vec::with_capacity(policy.len());
    for (p, r) in policy.iter().zip(reference) {
        let rz = reward(g, p.pos_z, r.pos_z)?;
        let az = g.scale(rz, w.beta)?;
        let az = g.add_scalar(az, -w.delta)?;
        let tz = neg_log_sigmoid(g, az)?;
        let rzy = reward(g, p.pos_zy, r.pos_zy)?;
        let azy = g.scale(rzy, w.beta)?;
        let azy = g.add_scalar(azy, -w.delta)?;
        let tzy = neg_log_sigmoid(g, azy)?;
        let tzy = g.scale(tzy, w.lambda_dpo)?;
        per.push(g.add(tz, tzy)?);
    }
    batch_mean(g, &per)
}

/// `L_total = L_RE + λ_DPO·L_DPO + λ_Anc·L_Anc`.
pub fn total_loss_graph(
    g: &mut Graph,
    policy: &[RecordLogProbs<Var>],
    reference: &[RecordLogProbs<f64>],
    w: &LossWeights,
) -> Result<LossVars> {
    let re = re_loss_graph(g, policy, reference, w)?;
    let dpo = dpo_loss_graph(g, policy, reference, w)?;
    let anc = anchor_loss_graph(g, policy, reference, w)?;
    let d = g.scale(dpo, w.lambda_dpo)?;
    let a = g.scale(anc, w.lambda_anc)?;
    let total = g.add_all(&[re, d, a])?;
    Ok(LossVars { re, dpo, anc, total })
}

/// Mean over records of `−(log p(z′) + log p(y | z′))`, given per-record `(z, y)` log-prob nodes.
pub fn sft_loss_graph(g: &mut Graph, records: &[(Var, Var)]) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::Empty("supervised loss over an empty batch".into()));
    }
    let mut per = Vec::with_capacity(records.len());
    for &(z, y) in records {
        let s = g.add(z, y)?;
        per.push(g.scale(s, -1.0)?);
    }
    batch_mean(g, &per)
}

fn bind_inputs(g: &mut Graph, inputs: &[RewardInputs]) -> Result<(Vec<RecordLogProbs<Var>>, Vec<RecordLogProbs<f64>>)> {
    let mut leaf = |v: f64| g.param(Tensor::scalar(v));
    let mut policy = Vec::with_capacity(inputs.len());
    for i in inputs {
        let p = &i.policy;
        policy.push(RecordLogProbs {
            pos_z: leaf(p.pos_z)?,
            pos_zy: leaf(p.pos_zy)?,
            neg_z: p.neg_z.iter().map(|&v| leaf(v)).collect::<Result<_>>()?,
            neg_zy: p.neg_zy.iter().map(|&v| leaf(v)).collect::<Result<_>>()?,
        });
    }
    Ok((policy, inputs.iter().map(|i| i.reference.clone()).collect()))
}

type LossFn = fn(&mut Graph, &[RecordLogProbs<Var>], &[RecordLogProbs<f64>], &LossWeights) -> Result<Var>;

fn eval_scalar(inputs: &[RewardInputs], w: &LossWeights, f: LossFn) -> Result<f64> {
    let mut g = Graph::new();
    let (p, r) = bind_inputs(&mut g, inputs)?;
    let v = f(&mut g, &p, &r, w)?;
    Ok(g.item(v))
}

pub fn re_loss(inputs: &[RewardInputs], w: &LossWeights) -> Result<f64> {
    eval_scalar(inputs, w, re_loss_graph)
}

pub fn dpo_loss(inputs: &[RewardInputs], w: &LossWeights) -> Result<f64> {
    eval_scalar(inputs, w, dpo_loss_graph)
}

pub fn anchor_loss(inputs: &[RewardInputs], w: &LossWeights) -> Result<f64> {
    eval_scalar(inputs, w, anchor_loss_graph)
}

pub fn total_loss(inputs: &[RewardInputs], w: &LossWeights) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (p, r) = bind_inputs(&mut g, inputs)?;
    Ok(total_loss_graph(&mut g, &p, &r, w)?.values(&g))
}

/// Supervised loss from per-record `(log p(z′), log p(y | z′))` values.
pub fn sft_loss(records: &[(f64, f64)]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = records
        .iter()
        .map(|&(z, y)| Ok((g.constant(Tensor::scalar(z))?, g.constant(Tensor::scalar(y))?)))
        .collect::<Result<Vec<_>>>()?;
    let l = sft_loss_graph(&mut g, &vars)?;
    Ok(g.item(l))
}
