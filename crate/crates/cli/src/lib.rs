//! Staged command-line pipeline over one output directory.
//!
//! Each subcommand reads the artifacts of earlier stages from the run
//! directory, writes its own, and appends one entry to `manifest.jsonl`.
//! `replay` re-runs an entry from its recorded configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use c3po_core::compression::SftRecord;
use c3po_core::ib;
use c3po_core::inducers::PreferenceRecord;
use c3po_core::jsonl;
use c3po_core::metrics::{write_json, write_rows_csv, MetricRow};
use c3po_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use c3po_core::pipeline::{self, EvalReport, PipelineConfig};
use c3po_core::toy_world::{read_corpus, write_corpus, PretrainRecord, QaItem, World};
use c3po_core::trainer::TrainReport;
use c3po_core::vocab::Vocab;

pub const MANIFEST: &str = "manifest.jsonl";
pub const CONFIG: &str = "config.toml";
pub const CORPUS: &str = "corpus.jsonl";
pub const PRETRAIN: &str = "pretrain.jsonl";
pub const BASE_CKPT: &str = "base.ckpt";
pub const SFT_DATA: &str = "sft.jsonl";
pub const REFERENCE_CKPT: &str = "reference.ckpt";
pub const PREFS: &str = "prefs.jsonl";
pub const TREATED_CKPT: &str = "treated.ckpt";

pub const GAMMA_GRID: [f64; 4] = [0.7, 0.8, 0.9, 1.0];
pub const LAMBDA_DPO_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

#[derive(Debug, Parser)]
#[command(name = "c3po-lab", version, about = "Hallucination-mitigation laboratory on a toy multimodal world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every pipeline subcommand.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Common {
    /// Master seed; every stage derives its own seeds from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML pipeline configuration. Defaults to the run directory's config.toml.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "c3po-run")]
    pub out: PathBuf,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda_dpo: Option<f64>,
    #[arg(long)]
    pub lambda_anc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    Gamma,
    LambdaDpo,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate the scene corpus and the biased pretraining captions.
    GenData(Common),
    /// Pretrain the base model on the biased captions.
    TrainBase(Common),
    /// Decode the train split with the base model and prune the chains.
    BuildSft(Common),
    /// Adapter SFT on the pruned chains; writes the merged reference.
    TrainSft(Common),
    /// Build contrastive preference records from the reference model.
    BuildPrefs(Common),
    /// Preference-tune the reference into the treated model.
    TrainCpo(Common),
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `base`, `reference`, `treated`, or a checkpoint path.
        #[arg(long, default_value = "treated")]
        checkpoint: String,
    },
    /// Numerically certify the bottleneck theorems.
    IbCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 2.0)]
        lambda_ib: f64,
    },
    /// Sweep γ or λ_DPO through the downstream stages.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
    /// Consolidated base-vs-treated comparison table.
    Report(Common),
    /// Re-run one manifest entry into another directory.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Zero-based entry index; defaults to the last entry.
        #[arg(long)]
        entry: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::TrainBase(_) => "train-base",
            Command::BuildSft(_) => "build-sft",
            Command::TrainSft(_) => "train-sft",
            Command::BuildPrefs(_) => "build-prefs",
            Command::TrainCpo(_) => "train-cpo",
            Command::Eval { .. } => "eval",
            Command::IbCheck { .. } => "ib-check",
            Command::Ablate { .. } => "ablate",
            Command::Report(_) => "report",
            Command::Replay { .. } => "replay",
        }
    }

    pub fn common(&self) -> Option<&Common> {
        match self {
            Command::GenData(c)
            | Command::TrainBase(c)
            | Command::BuildSft(c)
            | Command::TrainSft(c)
            | Command::BuildPrefs(c)
            | Command::TrainCpo(c)
            | Command::Report(c) => Some(c),
            Command::Eval { common, .. } | Command::IbCheck { common, .. } | Command::Ablate { common, .. } => {
                Some(common)
            }
            Command::Replay { .. } => None,
        }
    }
}

/// One append-only record per executed subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub command: Command,
    pub config: PipelineConfig,
    pub seed: u64,
    pub input_dir: PathBuf,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_of: Option<PathBuf>,
}

pub fn version_string() -> String {
    match option_env!("C3PO_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_string(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<RunManifest>> {
    jsonl::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn append_manifest(dir: &Path, entry: &RunManifest) -> Result<()> {
    use std::io::Write;
    let path = dir.join(MANIFEST);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(entry)?)?;
    Ok(())
}

/// Loads the base configuration and applies command-line overrides.
pub fn resolve_config(common: &Common) -> Result<PipelineConfig> {
    let from_dir = common.out.join(CONFIG);
    let path = common.config.clone().or_else(|| from_dir.exists().then_some(from_dir));
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(g) = common.gamma {
        cfg.gamma = g;
    }
    if let Some(m) = common.mask_ratio {
        cfg.mask_ratio = m;
    }
    let w = &mut cfg.cpo.loss;
    if let Some(v) = common.beta {
        w.beta = v;
    }
    if let Some(v) = common.delta {
        w.delta = v;
    }
    if let Some(v) = common.lambda_dpo {
        w.lambda_dpo = v;
    }
    if let Some(v) = common.lambda_anc {
        w.lambda_anc = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Paths produced by a stage run.
#[derive(Default)]
struct Outputs {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    wall_time_secs: f64,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    vocab: Vocab,
    input_dir: &'a Path,
    out_dir: &'a Path,
    record: Outputs,
}

impl Ctx<'_> {
    /// Path of an upstream artifact, or an error naming the stage that makes it.
    fn require(&mut self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.input_dir.join(name);
        if !p.is_file() {
            bail!(
                "missing upstream artifact {}: run `c3po-lab {producer}` first",
                p.display()
            );
        }
        self.record.inputs.push(p.clone());
        Ok(p)
    }

    fn output(&mut self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        let p = self.out_dir.join(name);
        self.record.outputs.push(p.clone());
        Ok(p)
    }

    fn corpus(&mut self) -> Result<Vec<QaItem>> {
        let p = self.require(CORPUS, "gen-data")?;
        Ok(read_corpus(p)?)
    }

    fn checkpoint(&mut self, name: &str, producer: &str) -> Result<ModelParams> {
        let p = self.require(name, producer)?;
        Ok(load_checkpoint(&p, &self.vocab.hash())?)
    }

    fn save_model(&mut self, params: &ModelParams, name: &str) -> Result<()> {
        let p = self.output(name)?;
        atomic(&p, |tmp| Ok(save_checkpoint(params, &self.vocab.hash(), tmp)?))?;
        let back = load_checkpoint(&p, &self.vocab.hash())?;
        if back != *params {
            bail!("checkpoint {} did not round-trip", p.display());
        }
        Ok(())
    }

    fn save_train(&mut self, report: &TrainReport, prefix: &str) -> Result<()> {
        self.record.wall_time_secs += report.wall_time_secs;
        let r = self.output(&format!("{prefix}_report.json"))?;
        atomic(&r, |tmp| Ok(write_json(report, tmp)?))?;
        let l = self.output(&format!("{prefix}_log.jsonl"))?;
        atomic(&l, |tmp| Ok(jsonl::write(tmp, &report.log)?))
    }

    fn save_json<T: Serialize>(&mut self, value: &T, name: &str) -> Result<()> {
        let p = self.output(name)?;
        atomic(&p, |tmp| Ok(write_json(value, tmp)?))
    }

    fn save_rows(&mut self, rows: &[MetricRow], name: &str) -> Result<()> {
        let p = self.output(name)?;
        atomic(&p, |tmp| Ok(write_rows_csv(rows, tmp)?))
    }
}

/// Writes through a temporary sibling and renames into place.
fn atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    if let Err(e) = write(&tmp) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 1;
    }
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Honours `C3PO_LAB_THREADS` as a cap on worker threads.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("C3PO_LAB_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("C3PO_LAB_THREADS must be a positive integer, got {v:?}"))?;
        // A second call in the same process keeps the pool that already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Replay { manifest, entry, out } => replay(manifest, *entry, out),
        other => {
            let common = other.common().expect("pipeline commands carry common flags");
            let cfg = resolve_config(common)?;
            run_recorded(other, &cfg, &common.out, &common.out, None)
        }
    }
}

fn run_recorded(command: &Command, cfg: &PipelineConfig, input_dir: &Path, out_dir: &Path, replay_of: Option<PathBuf>) -> Result<()> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let clock = Instant::now();
    let mut ctx = Ctx {
        cfg,
        vocab: Vocab::new(),
        input_dir,
        out_dir,
        record: Outputs::default(),
    };
    run_stage(command, &mut ctx)?;
    for p in &ctx.record.outputs {
        let len = fs::metadata(p).with_context(|| format!("declared output {} missing", p.display()))?.len();
        if len == 0 {
            bail!("declared output {} is empty", p.display());
        }
    }
    let record = ctx.record;
    let entry = RunManifest {
        subcommand: command.name().into(),
        command: command.clone(),
        config: cfg.clone(),
        seed: cfg.seed,
        input_dir: input_dir.to_path_buf(),
        inputs: record.inputs,
        outputs: record.outputs,
        version: version_string(),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        wall_time_secs: if record.wall_time_secs > 0.0 {
            record.wall_time_secs
        } else {
            clock.elapsed().as_secs_f64()
        },
        replay_of,
    };
    append_manifest(out_dir, &entry)
}

fn replay(manifest: &Path, entry: Option<usize>, out: &Path) -> Result<()> {
    let entries = read_manifest(manifest)?;
    let idx = entry.unwrap_or(entries.len().saturating_sub(1));
    let e = entries
        .get(idx)
        .ok_or_else(|| anyhow!("manifest {} has no entry {idx}", manifest.display()))?;
    if out == e.input_dir {
        bail!("replay output must differ from the original run directory");
    }
    run_recorded(&e.command, &e.config, &e.input_dir, out, Some(manifest.to_path_buf()))
}

fn run_stage(command: &Command, ctx: &mut Ctx) -> Result<()> {
    let cfg = ctx.cfg;
    match command {
        Command::GenData(_) => {
            let world = pipeline::gen_data(cfg)?;
            let c = ctx.output(CONFIG)?;
            let text = toml::to_string(cfg)?;
            atomic(&c, |tmp| Ok(fs::write(tmp, text)?))?;
            let p = ctx.output(CORPUS)?;
            atomic(&p, |tmp| Ok(write_corpus(&world.items, tmp)?))?;
            let p = ctx.output(PRETRAIN)?;
            atomic(&p, |tmp| Ok(jsonl::write(tmp, &world.pretrain)?))
        }
        Command::TrainBase(_) => {
            ctx.require(CORPUS, "gen-data")?;
            let p = ctx.require(PRETRAIN, "gen-data")?;
            let pretrain: Vec<PretrainRecord> = jsonl::read(p)?;
            let world = World {
                items: Vec::new(),
                pretrain,
            };
            let (params, report) = pipeline::base_model(cfg, &ctx.vocab, &world)?;
            ctx.save_model(&params, BASE_CKPT)?;
            ctx.save_train(&report, "base")
        }
        Command::BuildSft(_) => {
            let items = ctx.corpus()?;
            let base = ctx.checkpoint(BASE_CKPT, "train-base")?;
            let (records, report) = pipeline::build_sft(cfg, &ctx.vocab, &base, &items)?;
            let p = ctx.output(SFT_DATA)?;
            atomic(&p, |tmp| Ok(jsonl::write(tmp, &records)?))?;
            ctx.save_json(&report, "sft_data_report.json")
        }
        Command::TrainSft(_) => {
            let base = ctx.checkpoint(BASE_CKPT, "train-base")?;
            let p = ctx.require(SFT_DATA, "build-sft")?;
            let records: Vec<SftRecord> = jsonl::read(p)?;
            let (reference, report) = pipeline::sft_reference(cfg, &ctx.vocab, &base, &records)?;
            ctx.save_model(&reference, REFERENCE_CKPT)?;
            ctx.save_train(&report, "sft")
        }
        Command::BuildPrefs(_) => {
            let items = ctx.corpus()?;
            let reference = ctx.checkpoint(REFERENCE_CKPT, "train-sft")?;
            let (records, report) = pipeline::build_prefs(cfg, &ctx.vocab, &reference, &items)?;
            let p = ctx.output(PREFS)?;
            atomic(&p, |tmp| Ok(jsonl::write(tmp, &records)?))?;
            ctx.save_json(&report, "prefs_report.json")
        }
        Command::TrainCpo(_) => {
            let reference = ctx.checkpoint(REFERENCE_CKPT, "train-sft")?;
            let p = ctx.require(PREFS, "build-prefs")?;
            let records: Vec<PreferenceRecord> = jsonl::read(p)?;
            let mut c = cfg.clone();
            c.cpo.reference_checkpoint = Some(ctx.input_dir.join(REFERENCE_CKPT));
            let (treated, report) = pipeline::treat(&c, &ctx.vocab, &reference, &records)?;
            ctx.save_model(&treated, TREATED_CKPT)?;
            ctx.save_train(&report, "cpo")
        }
        Command::Eval { checkpoint, .. } => {
            let items = ctx.corpus()?;
            let (name, params) = named_checkpoint(ctx, checkpoint)?;
            let report = pipeline::evaluate(cfg, &ctx.vocab, &params, &items)?;
            ctx.save_json(&report, &format!("eval-{name}.json"))?;
            ctx.save_rows(&report.rows(), &format!("eval-{name}.csv"))
        }
        Command::IbCheck { trials, lambda_ib, .. } => {
            let report = ib_check(*trials, *lambda_ib, cfg.seed)?;
            ctx.save_json(&report, "ib_report.json")
        }
        Command::Ablate { sweep, .. } => {
            let items = ctx.corpus()?;
            let rows = match sweep {
                Sweep::Gamma => {
                    let base = ctx.checkpoint(BASE_CKPT, "train-base")?;
                    ablate_gamma(cfg, &ctx.vocab, &base, &items)?
                }
                Sweep::LambdaDpo => {
                    let reference = ctx.checkpoint(REFERENCE_CKPT, "train-sft")?;
                    let p = ctx.require(PREFS, "build-prefs")?;
                    let prefs: Vec<PreferenceRecord> = jsonl::read(p)?;
                    ablate_lambda(cfg, &ctx.vocab, &reference, &prefs, &items)?
                }
            };
            let stem = match sweep {
                Sweep::Gamma => "ablation-gamma",
                Sweep::LambdaDpo => "ablation-lambda-dpo",
            };
            ctx.save_json(&rows, &format!("{stem}.json"))?;
            let flat: Vec<MetricRow> = rows.iter().flat_map(AblationRow::metric_rows).collect();
            ctx.save_rows(&flat, &format!("{stem}.csv"))
        }
        Command::Report(_) => {
            let base = read_eval(ctx, "base")?;
            let treated = read_eval(ctx, "treated")?;
            let table = comparison(&base, &treated);
            ctx.save_json(&table, "report.json")?;
            let p = ctx.output("report.csv")?;
            atomic(&p, |tmp| write_comparison_csv(&table, tmp))
        }
        Command::Replay { .. } => bail!("replay entries cannot themselves be replayed"),
    }
}

fn named_checkpoint(ctx: &mut Ctx, name: &str) -> Result<(String, ModelParams)> {
    let (file, producer) = match name {
        "base" => (BASE_CKPT, "train-base"),
        "reference" => (REFERENCE_CKPT, "train-sft"),
        "treated" => (TREATED_CKPT, "train-cpo"),
        path => {
            let p = PathBuf::from(path);
            if !p.is_file() {
                bail!("checkpoint {} does not exist", p.display());
            }
            ctx.record.inputs.push(p.clone());
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
            return Ok((stem, load_checkpoint(&p, &ctx.vocab.hash())?));
        }
    };
    Ok((name.to_string(), ctx.checkpoint(file, producer)?))
}

fn read_eval(ctx: &mut Ctx, name: &str) -> Result<EvalReport> {
    let p = ctx.require(&format!("eval-{name}.json"), &format!("eval --checkpoint {name}"))?;
    let text = fs::read_to_string(&p)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbCheckReport {
    pub theorem1: ib::TheoremReport,
    pub theorem1_probe: ib::TheoremReport,
    pub theorem2: ib::TheoremReport,
    pub theorem2_probe: ib::TheoremReport,
    pub identities: ib::IdentityReport,
    pub witness_slack: f64,
}

pub fn ib_check(trials: usize, lambda: f64, seed: u64) -> Result<IbCheckReport> {
    let w = ib::two_bit_witness();
    Ok(IbCheckReport {
        theorem1: ib::verify_theorem1(trials, lambda, seed)?,
        theorem1_probe: ib::probe_theorem1(trials, lambda, seed)?,
        theorem2: ib::verify_theorem2(trials, lambda, seed)?,
        theorem2_probe: ib::probe_theorem2(trials, 1.0, seed)?,
        identities: ib::verify_identities(trials, seed)?,
        witness_slack: ib::compression_gap(&w, lambda)?.0,
    })
}

/// Headline numbers of one treated model in a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub parameter: String,
    pub value: f64,
    pub chair_s: f64,
    pub chair_i: f64,
    pub shr: f64,
    pub pope_accuracy: Vec<f64>,
    pub preference_accuracy: Option<f64>,
}

impl AblationRow {
    fn new(parameter: &str, value: f64, eval: &EvalReport, train: &TrainReport) -> Self {
        Self {
            parameter: parameter.into(),
            value,
            chair_s: eval.chair.c_s,
            chair_i: eval.chair.c_i,
            shr: eval.shr.shr,
            pope_accuracy: eval.pope.iter().map(|p| p.accuracy).collect(),
            preference_accuracy: train.preference_accuracy,
        }
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mode = format!("{}={}", self.parameter, self.value);
        vec![
            MetricRow::new("chair_s", &mode, self.chair_s, f64::NAN, f64::NAN),
            MetricRow::new("chair_i", &mode, self.chair_i, f64::NAN, f64::NAN),
            MetricRow::new("shr", &mode, self.shr, f64::NAN, f64::NAN),
        ]
    }
}

pub fn ablate_gamma(cfg: &PipelineConfig, vocab: &Vocab, base: &ModelParams, items: &[QaItem]) -> Result<Vec<AblationRow>> {
    GAMMA_GRID
        .iter()
        .map(|&g| {
            let c = PipelineConfig {
                gamma: g,
                ..cfg.clone()
            };
            let (sft, _) = pipeline::build_sft(&c, vocab, base, items)?;
            let (reference, _) = pipeline::sft_reference(&c, vocab, base, &sft)?;
            let (prefs, _) = pipeline::build_prefs(&c, vocab, &reference, items)?;
            let (treated, report) = pipeline::treat(&c, vocab, &reference, &prefs)?;
            let eval = pipeline::evaluate(&c, vocab, &treated, items)?;
            Ok(AblationRow::new("gamma", g, &eval, &report))
        })
        .collect()
}

pub fn ablate_lambda(
    cfg: &PipelineConfig,
    vocab: &Vocab,
    reference: &ModelParams,
    prefs: &[PreferenceRecord],
    items: &[QaItem],
) -> Result<Vec<AblationRow>> {
    LAMBDA_DPO_GRID
        .iter()
        .map(|&l| {
            let mut c = cfg.clone();
            c.cpo.loss.lambda_dpo = l;
            let (treated, report) = pipeline::treat(&c, vocab, reference, prefs)?;
            let eval = pipeline::evaluate(&c, vocab, &treated, items)?;
            Ok(AblationRow::new("lambda_dpo", l, &eval, &report))
        })
        .collect()
}

/// One metric for both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub mode: String,
    pub base: f64,
    pub treated: f64,
    pub delta: f64,
}

pub fn comparison(base: &EvalReport, treated: &EvalReport) -> Vec<ComparisonRow> {
    base.rows()
        .into_iter()
        .zip(treated.rows())
        .map(|(b, t)| ComparisonRow {
            delta: t.value - b.value,
            metric: b.metric,
            mode: b.mode,
            base: b.value,
            treated: t.value,
        })
        .collect()
}

fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut text = String::from("metric,mode,base,treated,delta\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{},{}\n", r.metric, r.mode, r.base, r.treated, r.delta));
    }
    fs::write(path, text)?;
    Ok(())
}

/// Files named in every manifest entry of `dir`, in order.
pub fn declared_outputs(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_manifest(&dir.join(MANIFEST))?
        .into_iter()
        .flat_map(|e| e.outputs)
        .collect())
}
