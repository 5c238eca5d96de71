//! `diffrisk` command-line driver.
//!
//! Exit codes: 0 on success, 2 for usage and input errors (bad flags,
//! missing or malformed files), 1 for everything else.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use diffrisk::config::Config;
use diffrisk::corpus::{generate_synthetic, load_jsonl, mine_git, save_jsonl, sev_rate, Corpus, DiffRecord, SyntheticConfig};
use diffrisk::embed::reference_provider;
use diffrisk::eval::{
    capture_curve, chronological_split, evaluate_models, generalization_eval, quantile_split_spec,
    random_gate_baseline, write_curve_csv, Scored, Split,
};
use diffrisk::features::FeatureTable;
use diffrisk::gating::{
    calibrate, decide, record_escalation, record_feedback, render_report, replay_escalations, Decision,
    EscalationRecord, FeedbackEntry, GatingPolicy, Outcome, Zone, ZoneThresholds,
};
use diffrisk::pipeline::{scorable, train_model, AlignedSpec, LoadedModel, ModelFile, ModelKind};
use diffrisk::protocol::serve;
use diffrisk::riskalign::NextTokenDistributionProvider;

const TRAIN_FRACTION: f64 = 0.6;
const VAL_FRACTION: f64 = 0.2;
const RANDOM_TRIALS: usize = 1000;
const CUSTOM_ZONE: &str = "custom";

#[derive(Parser)]
#[command(name = "diffrisk", version, about = "Diff risk scoring, release gating and SEV-capture evaluation")]
struct Cli {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a canonical JSONL corpus from a synthetic generator, a git
    /// repository or an existing JSONL file.
    Ingest(IngestArgs),
    /// Split chronologically, resample the training partition and fit a model.
    Train(TrainArgs),
    /// Write `id,score` CSV for a corpus partition.
    Score(ScoreArgs),
    /// Calibrate per-zone score cutoffs on a reference window.
    Calibrate(CalibrateArgs),
    /// Gate or allow each diff of a partition; writes decisions as JSONL.
    Gate(GateArgs),
    /// Capture per zone for one or more models, with ratios vs the baseline.
    Evaluate(EvaluateArgs),
    /// Print the author-facing risk report for one diff.
    Report(ReportArgs),
    /// Record an escalation of a gated diff, or replay the escalation log.
    Escalate(EscalateArgs),
    /// Record author feedback on a report.
    Feedback(FeedbackArgs),
    /// Serve the reference content models over the stdin/stdout protocol.
    ServeProvider(ServeArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["synthetic", "git", "jsonl"])))]
struct IngestArgs {
    /// Generate a seeded synthetic corpus with planted risk signal.
    #[arg(long)]
    synthetic: bool,
    /// Mine the history of a git repository.
    #[arg(long, value_name = "REPO")]
    git: Option<PathBuf>,
    /// Validate and canonicalise an existing JSONL corpus.
    #[arg(long, value_name = "FILE")]
    jsonl: Option<PathBuf>,
    /// SEV labels for --git: one `<commit> <0|1>` per line.
    #[arg(long, value_name = "FILE", requires = "git")]
    labels: Option<PathBuf>,
    /// Generator seed (default: seeds.synthetic from the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0.01)]
    sev_rate: f64,
    /// Standard deviation of the true risk logit.
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    /// Multiplier on the text-borne part of the planted signal.
    #[arg(long, default_value_t = 1.0)]
    text_signal: f64,
    #[arg(long, default_value = "orgA")]
    org: String,
    /// Output corpus (default: paths.corpus from the config).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// logreg, mlp, riskalign or ensemble.
    #[arg(value_parser = parse_kind)]
    kind: ModelKind,
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Training seed (default: seeds.train).
    #[arg(long)]
    seed: Option<u64>,
    /// Resampling seed (default: seeds.resample).
    #[arg(long)]
    resample_seed: Option<u64>,
    #[arg(long)]
    negatives_per_positive: Option<usize>,
    /// Model file (default: <paths.models>/<kind>.json).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartitionArg {
    All,
    Train,
    Val,
    Test,
}

impl PartitionArg {
    fn name(self) -> &'static str {
        match self {
            PartitionArg::All => "all",
            PartitionArg::Train => "train",
            PartitionArg::Val => "val",
            PartitionArg::Test => "test",
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    partition: PartitionArg,
    /// CSV output (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Reference window.
    #[arg(long, value_enum, default_value = "val")]
    partition: PartitionArg,
    /// Thresholds file (default: <paths.models>/thresholds.json).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// Where cutoffs come from when gating: a calibrated thresholds file, or a
/// fresh calibration on the validation partition.
#[derive(Args)]
#[command(group(ArgGroup::new("level").required(true).args(["zone", "g"])))]
struct ZoneArgs {
    /// Gating zone from the policy, e.g. green, weekend, yellow, red.
    #[arg(long)]
    zone: Option<String>,
    /// Ad-hoc gate fraction instead of a named zone.
    #[arg(long, value_parser = parse_fraction)]
    g: Option<f64>,
    /// Thresholds written by `calibrate`.
    #[arg(long, value_name = "PATH", conflicts_with = "g")]
    thresholds: Option<PathBuf>,
}

#[derive(Args)]
struct GateArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    zone: ZoneArgs,
    #[arg(long, value_enum, default_value = "test")]
    partition: PartitionArg,
    /// Reasons attached to each gated decision.
    #[arg(long, default_value_t = 3)]
    reasons: usize,
    /// Decisions JSONL (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Directory receiving one `<id>.txt` report per gated diff.
    #[arg(long, value_name = "DIR")]
    reports: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `NAME=PATH` or `PATH` (named after the model kind); repeatable.
    #[arg(long = "model", value_name = "[NAME=]PATH", required = true)]
    models: Vec<String>,
    /// Corpus the models were trained on; its test partition is evaluated.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Evaluate on this other organisation's corpus instead, after checking
    /// it shares nothing with --corpus.
    #[arg(long, value_name = "PATH")]
    foreign: Option<PathBuf>,
    /// Baseline model name (default: baseline_model from the config).
    #[arg(long)]
    baseline: Option<String>,
    /// Seed of the random-gating reference (default: seeds.baseline).
    #[arg(long)]
    seed: Option<u64>,
    /// Report CSV.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Capture-curve CSV (g in 1% steps).
    #[arg(long, value_name = "PATH")]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_name = "PATH")]
    model: PathBuf,
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    id: String,
    #[command(flatten)]
    zone: ZoneArgs,
    #[arg(long, default_value_t = 3)]
    reasons: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutcomeArg {
    Approved,
    Rejected,
}

#[derive(Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["diff_id", "replay"])))]
struct EscalateArgs {
    #[arg(long, requires_all = ["reason_code", "justification", "approver", "outcome"])]
    diff_id: Option<String>,
    #[arg(long)]
    reason_code: Option<String>,
    #[arg(long)]
    justification: Option<String>,
    #[arg(long)]
    approver: Option<String>,
    #[arg(long, value_enum)]
    outcome: Option<OutcomeArg>,
    /// Print every logged escalation as JSONL.
    #[arg(long)]
    replay: bool,
    /// Log file (default: <paths.logs>/escalations.jsonl).
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FeedbackArgs {
    #[arg(long)]
    diff_id: String,
    #[arg(long, action = clap::ArgAction::Set)]
    helpful: bool,
    #[arg(long, default_value = "")]
    comment: String,
    /// Log file (default: <paths.logs>/feedback.jsonl).
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("served").required(true).multiple(true).args(["embedding", "model"])))]
struct ServeArgs {
    /// Serve the reference embedder (seeded with seeds.embed).
    #[arg(long)]
    embedding: bool,
    /// Serve next-token distributions of this riskalign model file.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: diffrisk::Error| e.to_string())
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let g: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if g > 0.0 && g <= 1.0 {
        Ok(g)
    } else {
        Err(format!("gate fraction must lie in (0, 1], got {g}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// A downstream reader such as `head` closed stdout early.
fn broken_pipe(e: &anyhow::Error) -> bool {
    let is_pipe = |io: &io::Error| io.kind() == io::ErrorKind::BrokenPipe;
    e.chain().any(|c| {
        c.downcast_ref::<io::Error>().is_some_and(is_pipe)
            || c.downcast_ref::<csv::Error>()
                .is_some_and(|e| matches!(e.kind(), csv::ErrorKind::Io(io) if is_pipe(io)))
    })
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let input = e.chain().any(|c| {
        c.downcast_ref::<diffrisk::Error>().is_some_and(diffrisk::Error::is_input_error)
            || c.downcast_ref::<io::Error>().is_some()
            || c.downcast_ref::<UsageError>().is_some()
    });
    if input {
        2
    } else {
        1
    }
}

/// Invalid combination of otherwise well-formed arguments.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    match cli.command {
        Command::Ingest(a) => ingest(&cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Score(a) => score(&cfg, a),
        Command::Calibrate(a) => calibrate_cmd(&cfg, a),
        Command::Gate(a) => gate(&cfg, a),
        Command::Evaluate(a) => evaluate(&cfg, a),
        Command::Report(a) => report(&cfg, a),
        Command::Escalate(a) => escalate(&cfg, a),
        Command::Feedback(a) => feedback(&cfg, a),
        Command::ServeProvider(a) => serve_provider(&cfg, a),
    }
}

// ---------------------------------------------------------------------------
// helpers

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            ensure_parent(p)?;
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn corpus_path<'a>(cfg: &'a Config, flag: &'a Option<PathBuf>) -> &'a Path {
    flag.as_deref().unwrap_or(&cfg.paths.corpus)
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    load_jsonl(path).with_context(|| format!("loading corpus {}", path.display()))
}

/// A corpus with its chronological split and leak-free feature table.
struct Prepared {
    corpus: Corpus,
    split: Split,
    table: FeatureTable,
}

impl Prepared {
    fn load(cfg: &Config, path: &Path) -> Result<Self> {
        let corpus = load_corpus(path)?;
        let spec = match cfg.split {
            Some(spec) => spec,
            None => quantile_split_spec(&corpus, TRAIN_FRACTION, VAL_FRACTION)?,
        };
        let split = chronological_split(&corpus, &spec)?;
        let table = FeatureTable::build(&corpus, &cfg.features)?;
        Ok(Prepared { corpus, split, table })
    }

    fn partition(&self, p: PartitionArg) -> &Corpus {
        match p {
            PartitionArg::All => &self.corpus,
            PartitionArg::Train => &self.split.train,
            PartitionArg::Val => &self.split.val,
            PartitionArg::Test => &self.split.test,
        }
    }
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    let file = ModelFile::load(path)?;
    Ok(LoadedModel::new(file)?)
}

fn score_records(model: &LoadedModel, records: &[&DiffRecord], table: &FeatureTable) -> Result<Vec<f64>> {
    Ok(model.score(records, table)?)
}

/// Policy and cutoffs for `--zone`/`--g`, calibrating on the validation
/// partition unless a thresholds file is given.
fn resolve_thresholds(
    cfg: &Config,
    z: &ZoneArgs,
    model: &LoadedModel,
    prepared: &Prepared,
) -> Result<(String, ZoneThresholds)> {
    if let Some(path) = &z.thresholds {
        let th = ZoneThresholds::load(path).with_context(|| format!("loading thresholds {}", path.display()))?;
        let zone = z.zone.clone().expect("--thresholds requires --zone");
        th.cutoff(&zone)?;
        return Ok((zone, th));
    }
    let (zone, policy) = match (z.zone.as_deref(), z.g) {
        (Some(name), _) => {
            cfg.policy.zone(name)?;
            (name.to_string(), cfg.policy.clone())
        }
        (None, Some(g)) => (
            CUSTOM_ZONE.to_string(),
            GatingPolicy {
                zones: vec![
                    Zone {
                        name: "green".into(),
                        g: 0.0,
                    },
                    Zone {
                        name: CUSTOM_ZONE.into(),
                        g,
                    },
                ],
            },
        ),
        (None, None) => unreachable!("clap requires --zone or --g"),
    };
    let window = scorable(&prepared.split.val);
    if window.is_empty() {
        return Err(usage("validation partition is empty; pass --thresholds"));
    }
    let scores = score_records(model, &window, &prepared.table)?;
    let pairs: Vec<(String, f64)> = window.iter().map(|r| r.id.clone()).zip(scores).collect();
    let th = calibrate(&pairs, &policy, "val", model.kind().name())?;
    Ok((zone, th))
}

// ---------------------------------------------------------------------------
// commands

fn ingest(cfg: &Config, a: IngestArgs) -> Result<()> {
    let corpus = if a.synthetic {
        generate_synthetic(&SyntheticConfig {
            seed: a.seed.unwrap_or(cfg.seeds.synthetic),
            n: a.n,
            sev_rate: a.sev_rate,
            signal_strength: a.signal,
            text_signal: a.text_signal,
            org: a.org.clone(),
            ..SyntheticConfig::default()
        })?
    } else if let Some(repo) = &a.git {
        mine_git(repo, a.labels.as_deref(), &cfg.org_map).with_context(|| format!("mining {}", repo.display()))?
    } else if let Some(path) = &a.jsonl {
        load_corpus(path)?
    } else {
        unreachable!("clap requires a source")
    };
    let out = a.out.as_deref().unwrap_or(&cfg.paths.corpus);
    ensure_parent(out)?;
    save_jsonl(&corpus, out)?;
    let rate = if corpus.is_empty() { 0.0 } else { sev_rate(&corpus)? };
    println!(
        "wrote {} records ({} SEVs, {:.2}%) to {}",
        corpus.len(),
        corpus.sev_count(),
        100.0 * rate,
        out.display()
    );
    Ok(())
}

fn train(mut cfg: Config, a: TrainArgs) -> Result<()> {
    if let Some(seed) = a.seed {
        cfg.seeds.train = seed;
    }
    if let Some(seed) = a.resample_seed {
        cfg.seeds.resample = seed;
    }
    if let Some(ratio) = a.negatives_per_positive {
        cfg.resample.negatives_per_positive = ratio;
        cfg.validate()?;
    }
    let prepared = Prepared::load(&cfg, corpus_path(&cfg, &a.corpus))?;
    let s = &prepared.split;
    println!(
        "split: train {} / val {} / test {} (excluded {})",
        s.train.len(),
        s.val.len(),
        s.test.len(),
        s.excluded.len()
    );
    let (file, report) = train_model(a.kind, s, &prepared.table, &cfg)?;
    println!(
        "class counts before resampling: {} positive, {} negative",
        report.before.positives, report.before.negatives
    );
    println!(
        "class counts after resampling: {} positive, {} negative",
        report.after.positives, report.after.negatives
    );
    let out = a
        .out
        .unwrap_or_else(|| cfg.paths.models.join(format!("{}.json", a.kind.name())));
    ensure_parent(&out)?;
    file.save(&out)?;
    println!("wrote {} model to {}", a.kind, out.display());
    Ok(())
}

fn score(cfg: &Config, a: ScoreArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let prepared = Prepared::load(cfg, corpus_path(cfg, &a.corpus))?;
    let records = scorable(prepared.partition(a.partition));
    let scores = score_records(&model, &records, &prepared.table)?;
    let mut w = csv::Writer::from_writer(output(a.out.as_deref())?);
    w.write_record(["id", "score"])?;
    for (r, s) in records.iter().zip(&scores) {
        w.write_record([r.id.as_str(), &s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn calibrate_cmd(cfg: &Config, a: CalibrateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let prepared = Prepared::load(cfg, corpus_path(cfg, &a.corpus))?;
    let window = scorable(prepared.partition(a.partition));
    let scores = score_records(&model, &window, &prepared.table)?;
    let pairs: Vec<(String, f64)> = window.iter().map(|r| r.id.clone()).zip(scores).collect();
    let th = calibrate(&pairs, &cfg.policy, a.partition.name(), model.kind().name())?;
    let out = a.out.unwrap_or_else(|| cfg.paths.models.join("thresholds.json"));
    ensure_parent(&out)?;
    th.save(&out)?;
    for z in &th.zones {
        match z.cutoff.score() {
            Some(s) => println!("{} (g={}): cutoff {s:.6}", z.zone, z.g),
            None => println!("{} (g={}): gates nothing", z.zone, z.g),
        }
    }
    println!("wrote thresholds for {} window diffs to {}", th.window_size, out.display());
    Ok(())
}

fn gate(cfg: &Config, a: GateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let prepared = Prepared::load(cfg, corpus_path(cfg, &a.corpus))?;
    let (zone, th) = resolve_thresholds(cfg, &a.zone, &model, &prepared)?;
    let records = scorable(prepared.partition(a.partition));
    let scores = score_records(&model, &records, &prepared.table)?;
    if let Some(dir) = &a.reports {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = output(a.out.as_deref())?;
    let mut gated = 0;
    for (r, &s) in records.iter().zip(&scores) {
        let mut d = decide(&r.id, s, &zone, &th, Vec::new())?;
        if d.decision == Decision::Gate {
            gated += 1;
            d.reasons = model.reasons(r, &prepared.table, a.reasons)?;
            if let Some(dir) = &a.reports {
                let path = dir.join(format!("{}.txt", r.id));
                fs::write(&path, render_report(r, &d)).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        serde_json::to_writer(&mut w, &d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    eprintln!("zone {zone}: gated {gated} of {} diffs", records.len());
    Ok(())
}

fn parse_model_spec(spec: &str) -> (Option<&str>, &Path) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (Some(name), Path::new(path)),
        _ => (None, Path::new(spec)),
    }
}

fn evaluate(cfg: &Config, a: EvaluateArgs) -> Result<()> {
    let prepared = Prepared::load(cfg, corpus_path(cfg, &a.corpus))?;
    let foreign = match &a.foreign {
        Some(path) => Some((load_corpus(path)?, path)),
        None => None,
    };
    let foreign_table;
    let (eval_corpus, table) = match &foreign {
        Some((c, _)) => {
            foreign_table = FeatureTable::build(c, &cfg.features)?;
            (c, &foreign_table)
        }
        None => (&prepared.split.test, &prepared.table),
    };
    let records = scorable(eval_corpus);
    if records.is_empty() {
        return Err(usage("evaluation partition has no scorable diffs"));
    }

    let mut models: Vec<(String, Vec<Scored>)> = Vec::new();
    for spec in &a.models {
        let (name, path) = parse_model_spec(spec);
        let model = load_model(path)?;
        let name = name.map_or_else(|| model.kind().name().to_string(), str::to_string);
        if models.iter().any(|(n, _)| *n == name) {
            return Err(usage(format!("model name {name:?} given twice")));
        }
        let scores = score_records(&model, &records, table)?;
        models.push((name, Scored::from_records(records.iter().copied(), &scores)));
    }
    let baseline = a.baseline.as_deref().unwrap_or(&cfg.baseline_model);
    let report = match &foreign {
        Some((c, _)) => generalization_eval(&prepared.corpus, c, &models, baseline, &cfg.policy)?,
        None => evaluate_models(&models, baseline, &cfg.policy)?,
    };

    print!("{}", report.to_table());
    let labels: Vec<bool> = records.iter().map(|r| r.caused_sev).collect();
    let seed = a.seed.unwrap_or(cfg.seeds.baseline);
    let random = cfg
        .policy
        .gating_zones()
        .map(|z| random_gate_baseline(&labels, z.g, RANDOM_TRIALS, seed).map(|c| format!("{} {c:.1}%", z.name)))
        .collect::<diffrisk::Result<Vec<_>>>()?;
    println!("random gating ({RANDOM_TRIALS} trials): {}", random.join(", "));

    if let Some(path) = &a.out {
        report.write_csv(output(Some(path))?)?;
    }
    if let Some(path) = &a.curve {
        let curves = models
            .iter()
            .map(|(name, s)| Ok((name.clone(), capture_curve(s)?)))
            .collect::<diffrisk::Result<Vec<_>>>()?;
        write_curve_csv(&curves, output(Some(path))?)?;
    }
    Ok(())
}

fn report(cfg: &Config, a: ReportArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let prepared = Prepared::load(cfg, corpus_path(cfg, &a.corpus))?;
    let record = prepared
        .corpus
        .get(&a.id)
        .ok_or_else(|| usage(format!("diff {:?} not in corpus", a.id)))?;
    if record.changes.is_empty() {
        return Err(diffrisk::Error::NoFileChanges(a.id.clone()).into());
    }
    let (zone, th) = resolve_thresholds(cfg, &a.zone, &model, &prepared)?;
    let score = score_records(&model, &[record], &prepared.table)?[0];
    let reasons = model.reasons(record, &prepared.table, a.reasons)?;
    let d = decide(&record.id, score, &zone, &th, reasons)?;
    print!("{}", render_report(record, &d));
    Ok(())
}

fn escalate(cfg: &Config, a: EscalateArgs) -> Result<()> {
    let log = a.log.unwrap_or_else(|| cfg.paths.logs.join("escalations.jsonl"));
    if a.replay {
        let mut w = output(None)?;
        for rec in replay_escalations(&log)? {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        return Ok(());
    }
    let (Some(diff_id), Some(reason_code), Some(justification), Some(approver_id), Some(outcome)) =
        (a.diff_id, a.reason_code, a.justification, a.approver, a.outcome)
    else {
        bail!(usage("escalation needs --diff-id, --reason-code, --justification, --approver and --outcome"));
    };
    let rec = EscalationRecord {
        diff_id,
        reason_code,
        justification,
        approver_id,
        outcome: match outcome {
            OutcomeArg::Approved => Outcome::Approved,
            OutcomeArg::Rejected => Outcome::Rejected,
        },
    };
    ensure_parent(&log)?;
    record_escalation(&rec, &cfg.escalation.reason_codes, &log)?;
    println!("logged escalation of {} to {}", rec.diff_id, log.display());
    Ok(())
}

fn feedback(cfg: &Config, a: FeedbackArgs) -> Result<()> {
    let log = a.log.unwrap_or_else(|| cfg.paths.logs.join("feedback.jsonl"));
    ensure_parent(&log)?;
    record_feedback(
        &FeedbackEntry {
            diff_id: a.diff_id.clone(),
            helpful: a.helpful,
            comment: a.comment,
        },
        &log,
    )?;
    println!("logged feedback on {} to {}", a.diff_id, log.display());
    Ok(())
}

fn serve_provider(cfg: &Config, a: ServeArgs) -> Result<()> {
    let embedder = a.embedding.then(|| reference_provider(cfg.seeds.embed));
    let aligned = match &a.model {
        None => None,
        Some(path) => match ModelFile::load(path)? {
            ModelFile::Riskalign {
                aligned: AlignedSpec::Reference { model },
                ..
            }
            | ModelFile::Ensemble {
                aligned: AlignedSpec::Reference { model },
                ..
            } => Some(model),
            _ => return Err(usage(format!("{} holds no in-process aligned model", path.display()))),
        },
    };
    let stdin = io::stdin().lock();
    let stdout = io::stdout().lock();
    serve(
        stdin,
        stdout,
        embedder.as_ref().map(|e| e as &dyn diffrisk::embed::EmbeddingProvider),
        aligned.as_ref().map(|m| m as &dyn NextTokenDistributionProvider),
    )?;
    Ok(())
}
