//! End-to-end stages: world generation, biased pretraining, pruned-chain SFT,
//! preference construction, preference tuning and evaluation.

use serde::{Deserialize, Serialize};

use crate::compression::{build_sft_dataset, Scorer, ScorerKind, SftRecord, SftReport, TokenFrequencies};
use crate::error::{Error, Result};
use crate::inducers::{build_preference_dataset, PreferenceConfig, PreferenceRecord, PreferenceReport};
use crate::metrics::{
    answer_hallucinated, chain_hallucinated, chair, cot_propagation, pope_score, shr_oracle, ChairReport, MetricRow,
    PopeModeReport, PropagationTable, ShrReport,
};
use crate::model::{attention_visual_mass, decode_many, ModelConfig, ModelParams, TracedOutput};
use crate::seeds;
use crate::toy_world::{
    canonical_chain, generate_world, pope_items, CorpusStats, PopeMode, QaItem, Question, Split, World, WorldConfig,
};
use crate::trainer::{train_base, train_cpo, train_sft, Stage, TrainConfig, TrainReport};
use crate::vocab::Vocab;

/// Every record whose index satisfies `i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1`
/// is held out of preference tuning and used for preference accuracy.
pub const HOLDOUT_EVERY: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus_size: usize,
    /// Generation budget per decode, in tokens.
    pub max_len: usize,
    pub gamma: f64,
    pub mask_ratio: f64,
    pub scorer: ScorerKind,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub sft: TrainConfig,
    pub cpo: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus_size: 2000,
            max_len: 64,
            gamma: 0.9,
            mask_ratio: 0.3,
            scorer: ScorerKind::Oracle,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            base: TrainConfig::defaults(Stage::Base),
            sft: TrainConfig::defaults(Stage::Sft),
            cpo: TrainConfig::defaults(Stage::Cpo),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.corpus_size == 0 {
            return Err(Error::invalid("corpus size must be at least 1"));
        }
        if self.max_len < 4 {
            return Err(Error::invalid("max_len must be at least 4"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        self.world.validate()?;
        self.model_config(&Vocab::new()).validate()
    }

    /// Model configuration with the vocabulary size filled in.
    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            lora_rank: self.sft.lora_rank,
            lora_alpha: self.sft.lora_alpha,
            ..self.model.clone()
        }
    }

    /// Stage config whose seed is derived from the master seed, offset by the stage's own `seed` field.
    pub fn stage_config(&self, stage: Stage) -> TrainConfig {
        let base = match stage {
            Stage::Base => &self.base,
            Stage::Sft => &self.sft,
            Stage::Cpo => &self.cpo,
        };
        TrainConfig {
            stage,
            seed: seeds::derive(self.seed, stage.name(), base.seed),
            ..base.clone()
        }
    }
}

pub fn gen_data(cfg: &PipelineConfig) -> Result<World> {
    cfg.validate()?;
    generate_world(cfg.corpus_size, &cfg.world, seeds::derive(cfg.seed, "world", 0))
}

pub fn split_items(items: &[QaItem], split: Split) -> Vec<QaItem> {
    items.iter().filter(|it| it.split == split).cloned().collect()
}

pub fn base_model(cfg: &PipelineConfig, vocab: &Vocab, world: &World) -> Result<(ModelParams, TrainReport)> {
    let init = ModelParams::init(cfg.model_config(vocab), seeds::derive(cfg.seed, "init", 0))?;
    train_base(&init, vocab, &world.pretrain, &cfg.stage_config(Stage::Base))
}

/// The heuristic scorer counts tokens over the canonical chains of `train`.
pub fn scorer(cfg: &PipelineConfig, train: &[QaItem]) -> Scorer {
    match cfg.scorer {
        ScorerKind::Oracle => Scorer::Oracle,
        ScorerKind::Heuristic => Scorer::Heuristic(TokenFrequencies::from_chains(
            train
                .iter()
                .map(|it| canonical_chain(&it.annotation, cfg.world.width, cfg.world.height)),
        )),
    }
}

/// Pruned-chain supervised records from the base model's own generations on the train split.
pub fn build_sft(cfg: &PipelineConfig, vocab: &Vocab, base: &ModelParams, items: &[QaItem]) -> Result<(Vec<SftRecord>, SftReport)> {
    let train = split_items(items, Split::Train);
    build_sft_dataset(base, vocab, &train, cfg.gamma, &scorer(cfg, &train), cfg.max_len)
}

/// Adapter SFT; the returned reference has its adapters merged.
pub fn sft_reference(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    base: &ModelParams,
    records: &[SftRecord],
) -> Result<(ModelParams, TrainReport)> {
    let (tuned, report) = train_sft(base, vocab, records, &cfg.stage_config(Stage::Sft))?;
    Ok((tuned.merged(), report))
}

pub fn build_prefs(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    reference: &ModelParams,
    items: &[QaItem],
) -> Result<(Vec<PreferenceRecord>, PreferenceReport)> {
    let train = split_items(items, Split::Train);
    let pc = PreferenceConfig {
        gamma: cfg.gamma,
        mask_ratio: cfg.mask_ratio,
        seed: seeds::derive(cfg.seed, "preferences", 0),
        max_len: cfg.max_len,
    };
    build_preference_dataset(reference, vocab, &train, &pc)
}

/// `(training, held-out)` preference records.
pub fn split_preferences(records: &[PreferenceRecord]) -> (Vec<PreferenceRecord>, Vec<PreferenceRecord>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        if i % HOLDOUT_EVERY == HOLDOUT_EVERY - 1 {
            held.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    if train.is_empty() {
        return (held, Vec::new());
    }
    (train, held)
}

/// `cfg.cpo.reference_checkpoint` only needs to be set by callers that load the reference from disk.
pub fn treat(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    reference: &ModelParams,
    records: &[PreferenceRecord],
) -> Result<(ModelParams, TrainReport)> {
    let mut tc = cfg.stage_config(Stage::Cpo);
    tc.reference_checkpoint.get_or_insert_with(|| "<in-memory>".into());
    let (train, held) = split_preferences(records);
    train_cpo(reference, reference, vocab, &train, &held, &tc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTrace {
    pub id: String,
    pub question: String,
    pub z: Vec<String>,
    pub y: Vec<String>,
    pub malformed: bool,
    pub visual_mass: f64,
    pub chain_hallucinated: bool,
    pub answer_hallucinated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub items: usize,
    pub malformed: usize,
    /// CHAIR over describe answers.
    pub chair: ChairReport,
    /// CHAIR over describe answers with the misleading prefix.
    pub chair_induced: ChairReport,
    pub pope: Vec<PopeModeReport>,
    pub shr: ShrReport,
    pub mean_visual_mass: f64,
    pub propagation: PropagationTable,
    pub traces: Vec<ItemTrace>,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let c = &self.chair;
        let ci = &self.chair_induced;
        let mut rows = vec![
            MetricRow::new("chair_s", "", c.c_s, c.hallucinated_captions as f64, c.total_captions as f64),
            MetricRow::new("chair_i", "", c.c_i, c.hallucinated_objects as f64, c.total_objects as f64),
            MetricRow::new("chair_s", "induced", ci.c_s, ci.hallucinated_captions as f64, ci.total_captions as f64),
            MetricRow::new("chair_i", "induced", ci.c_i, ci.hallucinated_objects as f64, ci.total_objects as f64),
        ];
        for p in &self.pope {
            let mode = p.mode.map_or("", PopeMode::name);
            let n = p.total() as f64;
            rows.push(MetricRow::new("pope_accuracy", mode, p.accuracy, (p.tp + p.tn) as f64, n));
            rows.push(MetricRow::new("pope_f1", mode, p.f1, 2.0 * p.tp as f64, (2 * p.tp + p.fp + p.r#fn) as f64));
        }
        let s = &self.shr;
        rows.push(MetricRow::new("shr", "", s.shr, s.hallucinated_sentences as f64, s.total_sentences as f64));
        rows.push(MetricRow::new(
            "attention_visual_mass",
            "",
            self.mean_visual_mass,
            self.traces.iter().map(|t| t.visual_mass).sum(),
            self.traces.len() as f64,
        ));
        let p = &self.propagation;
        rows.push(MetricRow::new(
            "p_answer_h_given_cot_h",
            "",
            p.p_given_hallucinated.unwrap_or(f64::NAN),
            p.answer_hallucinated_given_cot_hallucinated as f64,
            p.cot_hallucinated as f64,
        ));
        rows.push(MetricRow::new(
            "p_answer_h_given_cot_clean",
            "",
            p.p_given_clean.unwrap_or(f64::NAN),
            p.answer_hallucinated_given_cot_clean as f64,
            p.cot_clean as f64,
        ));
        rows
    }
}

/// Decodes the eval split, its induced variants and the existence probes, and
/// computes every metric. Probe co-occurrence statistics come from the train split.
pub fn evaluate(cfg: &PipelineConfig, vocab: &Vocab, params: &ModelParams, items: &[QaItem]) -> Result<EvalReport> {
    let eval = split_items(items, Split::Eval);
    if eval.is_empty() {
        return Err(Error::Empty("the corpus has no eval split".into()));
    }
    let stats = CorpusStats::from_items(&split_items(items, Split::Train));
    let base_seed = seeds::derive(cfg.seed, "pope", 0);
    let probes: Vec<(PopeMode, Vec<QaItem>)> = PopeMode::ALL
        .iter()
        .map(|&m| pope_items(&eval, m, &stats, base_seed).map(|p| (m, p)))
        .collect::<Result<_>>()?;
    let describe: Vec<&QaItem> = eval
        .iter()
        .filter(|it| matches!(it.question(), Ok(Question::Describe)))
        .collect();
    let induced_x: Vec<Vec<String>> = describe.iter().map(|it| crate::inducers::misleading_prefix(&it.x)).collect();

    let mut inputs: Vec<(&[String], &[String])> = eval.iter().map(|it| (&it.v[..], &it.x[..])).collect();
    inputs.extend(describe.iter().zip(&induced_x).map(|(it, x)| (&it.v[..], &x[..])));
    for (_, p) in &probes {
        inputs.extend(p.iter().map(|it| (&it.v[..], &it.x[..])));
    }
    let visual_len = eval[0].v.len();
    let outs: Vec<(TracedOutput, f64)> = decode_many(params, vocab, &inputs, cfg.max_len, |_, mut o| {
        let mass = attention_visual_mass(&o, 0..visual_len)?;
        o.attention.clear();
        Ok((o, mass))
    })?;
    let (main, rest) = outs.split_at(eval.len());
    let (induced, probe_outs) = rest.split_at(describe.len());

    let traces: Vec<ItemTrace> = eval
        .iter()
        .zip(main)
        .map(|(it, (o, mass))| ItemTrace {
            id: it.id.clone(),
            question: it.x.join(" "),
            z: o.z.clone(),
            y: o.y.clone(),
            malformed: o.malformed,
            visual_mass: *mass,
            chain_hallucinated: chain_hallucinated(it, &o.z),
            answer_hallucinated: answer_hallucinated(it, &o.y),
        })
        .collect();
    let captions: Vec<(&[String], &[_])> = eval
        .iter()
        .zip(main)
        .filter(|(it, _)| matches!(it.question(), Ok(Question::Describe)))
        .map(|(it, (o, _))| (&o.y[..], &it.annotation[..]))
        .collect();
    let induced_caps: Vec<(&[String], &[_])> =
        describe.iter().zip(induced).map(|(it, (o, _))| (&o.y[..], &it.annotation[..])).collect();
    let mut pope = Vec::with_capacity(probes.len());
    let mut offset = 0;
    for (mode, p) in &probes {
        let answers: Vec<Vec<String>> = probe_outs[offset..offset + p.len()].iter().map(|(o, _)| o.y.clone()).collect();
        offset += p.len();
        pope.push(pope_score(p, &answers, Some(*mode))?);
    }
    let shr_in: Vec<(&[String], &[String], &[_])> = eval
        .iter()
        .zip(main)
        .map(|(it, (o, _))| (&o.z[..], &o.y[..], &it.annotation[..]))
        .collect();
    let cases: Vec<(bool, bool)> = traces.iter().map(|t| (t.chain_hallucinated, t.answer_hallucinated)).collect();
    Ok(EvalReport {
        fingerprint: params.merged().fingerprint(),
        items: eval.len(),
        malformed: traces.iter().filter(|t| t.malformed).count(),
        chair: chair(&captions)?,
        chair_induced: chair(&induced_caps)?,
        pope,
        shr: shr_oracle(&shr_in)?,
        mean_visual_mass: traces.iter().map(|t| t.visual_mass).sum::<f64>() / traces.len() as f64,
        propagation: cot_propagation(&cases),
        traces,
    })
}

/// Every artifact of one in-memory pipeline run.
pub struct PipelineRun {
    pub world: World,
    pub base: ModelParams,
    pub base_report: TrainReport,
    pub sft: Vec<SftRecord>,
    pub sft_report: SftReport,
    pub reference: ModelParams,
    pub reference_report: TrainReport,
    pub prefs: Vec<PreferenceRecord>,
    pub prefs_report: PreferenceReport,
    pub treated: ModelParams,
    pub treated_report: TrainReport,
}

/// Runs every training stage in order.
pub fn run_all(cfg: &PipelineConfig, vocab: &Vocab) -> Result<PipelineRun> {
    let world = gen_data(cfg)?;
    let (base, base_report) = base_model(cfg, vocab, &world)?;
    let (sft, sft_report) = build_sft(cfg, vocab, &base, &world.items)?;
    let (reference, reference_report) = sft_reference(cfg, vocab, &base, &sft)?;
    let (prefs, prefs_report) = build_prefs(cfg, vocab, &reference, &world.items)?;
    let (treated, treated_report) = treat(cfg, vocab, &reference, &prefs)?;
    Ok(PipelineRun {
        world,
        base,
        base_report,
        sft,
        sft_report,
        reference,
        reference_report,
        prefs,
        prefs_report,
        treated,
        treated_report,
    })
}
