//! Command-line surface. Every pipeline step is a subcommand reading and
//! writing line-delimited JSON, configured by one optional TOML file plus
//! flag overrides (flags win). All commands are deterministic given the
//! configuration and seed; reports embed the effective configuration so
//! results stay traceable.
//!
//! File shapes:
//!
//! * corpus: see [`crate::corpus::load`];
//! * ops: `{"id","ops"}` plus `anchors`/`source_len` when extracted from
//!   gold pairs (anchored application needs them);
//! * predictions: `{"id","prediction"}`;
//! * prepared inputs: `{"id","input","target","meta"}`;
//! * reports: one JSON object with a `config` key and flat metric keys.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::corpus::{self, DialogueSample, Format};
use crate::editscript::{apply, parse_with, serialize_with_markers, Layout, Policy, Strategy};
use crate::engine::{self, AnalyzeOptions, RunOptions, RunResult, SampleOutcome, Variant};
use crate::metrics::{self, EvalReport};
use crate::rng;
use crate::text::{tokenize_with_markers, TokenSeq, TokenizeMode};

#[derive(Debug, Parser)]
#[command(
    name = "iur",
    version,
    about = "Edit-script tooling for incomplete utterance rewriting"
)]
pub struct Cli {
    #[command(flatten)]
    pub globals: GlobalArgs,
    #[command(subcommand)]
    pub command: CommandKind,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML configuration file; flags override its fields.
    #[arg(long, global = true, env = "IUR_CONFIG")]
    pub config: Option<PathBuf>,
    /// Base seed for every random draw (also reseeds perturbation).
    #[arg(long, global = true, env = "IUR_SEED")]
    pub seed: Option<u64>,
    /// Tokenization mode: auto, char, or whitespace.
    #[arg(long, global = true, env = "IUR_MODE")]
    pub mode: Option<TokenizeMode>,
    /// Serialized script layout: positional or grouped.
    #[arg(long, global = true, env = "IUR_LAYOUT")]
    pub layout: Option<Layout>,
    /// Abort on malformed scripts and unplaceable operations.
    #[arg(long, global = true, conflicts_with = "lenient")]
    pub strict: bool,
    /// Skip and count malformed constructs instead of aborting.
    #[arg(long, global = true)]
    pub lenient: bool,
    /// Directory for outputs of commands given no explicit path.
    #[arg(long, global = true, env = "IUR_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CommandKind {
    /// Extract gold edit scripts from (incomplete, rewritten) pairs.
    Extract(ExtractArgs),
    /// Apply edit scripts from an ops file to a corpus.
    Apply(ApplyArgs),
    /// Build stage-1 or stage-2 model input files.
    Prepare(PrepareArgs),
    /// Run a pipeline variant over a corpus using configured backends.
    Infer(InferArgs),
    /// Score a predictions file against corpus references.
    Eval(EvalArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Correlate stage-1 ops accuracy with final rewrite accuracy.
    Analyze(AnalyzeArgs),
    /// Line-protocol echo backend used by the integration tests.
    #[command(hide = true)]
    BackendEcho(BackendEchoArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Corpus file.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Corpus format; inferred from the extension when absent.
    #[arg(long)]
    pub format: Option<Format>,
    /// Ops output file [default: <output_dir>/ops.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    /// Corpus file supplying the incomplete utterances.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// Ops file to apply.
    #[arg(long)]
    pub ops: PathBuf,
    /// Position resolution: anchored, matched, or random.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Predictions output file [default: <output_dir>/predictions.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// Which stage's inputs to build.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Stage-2 ops from this predictions-of-stage-1 file instead of
    /// perturbed gold scripts.
    #[arg(long, conflicts_with = "empty_ops")]
    pub ops: Option<PathBuf>,
    /// Leave the stage-2 ops slot empty.
    #[arg(long)]
    pub empty_ops: bool,
    /// Prepared output file [default: <output_dir>/stage<N>.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// two-stage, stage1-only, replace-then-insert, or gold-ops.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Predictions output file [default: <output_dir>/predictions.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the raw stage-1 ops strings here.
    #[arg(long)]
    pub ops_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference corpus.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// Report output file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Stage-1 ops file.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Final predictions file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference corpus.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub format: Option<Format>,
    /// Report output file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackendEchoArgs {
    /// Prepend this to every output.
    #[arg(long)]
    pub prefix: Option<String>,
    /// Ids to stay silent about (repeatable).
    #[arg(long)]
    pub skip_id: Vec<String>,
    /// Delay before each reply.
    #[arg(long, default_value_t = 0)]
    pub delay_ms: u64,
}

/// What a command did, for the exit code and the always-printed summary.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub total: usize,
    pub failures: usize,
    /// Lenient repairs: skipped ops, parse diagnostics, missing records
    /// tolerated under the lenient policy.
    pub repairs: usize,
    pub strict: bool,
    pub quiet: bool,
}

impl Outcome {
    fn clean(total: usize, strict: bool) -> Outcome {
        Outcome {
            total,
            strict,
            ..Outcome::default()
        }
    }

    fn quiet() -> Outcome {
        Outcome {
            quiet: true,
            ..Outcome::default()
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.failures > 0 && self.strict {
            1
        } else {
            0
        }
    }
}

/// Parses the process arguments, runs the command, prints the summary,
/// and returns the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(outcome) => {
            if !outcome.quiet {
                eprintln!(
                    "processed {} samples: {} failed, {} lenient repairs",
                    outcome.total, outcome.failures, outcome.repairs
                );
            }
            outcome.exit_code()
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    if let CommandKind::BackendEcho(args) = &cli.command {
        backend_echo(args)?;
        return Ok(Outcome::quiet());
    }
    let config = effective_config(&cli.globals)?;
    match cli.command {
        CommandKind::Extract(args) => cmd_extract(&args, &config),
        CommandKind::Apply(args) => cmd_apply(&args, &config),
        CommandKind::Prepare(args) => cmd_prepare(&args, &config),
        CommandKind::Infer(args) => cmd_infer(&args, &config),
        CommandKind::Eval(args) => cmd_eval(&args, &config),
        CommandKind::Stats(args) => cmd_stats(&args, &config),
        CommandKind::Analyze(args) => cmd_analyze(&args, &config),
        CommandKind::BackendEcho(_) => unreachable!("handled above"),
    }
}

/// Loads the config file (or defaults) and applies flag overrides.
pub fn effective_config(globals: &GlobalArgs) -> Result<Config> {
    let mut config = match &globals.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = globals.seed {
        config.seed = seed;
        config.perturb.seed = seed;
    }
    if let Some(mode) = globals.mode {
        config.mode = mode;
    }
    if let Some(layout) = globals.layout {
        config.layout = layout;
    }
    if globals.strict {
        config.policy = Policy::Strict;
    }
    if globals.lenient {
        config.policy = Policy::Lenient;
    }
    if let Some(dir) = &globals.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

/// One serialized script, with anchors when it came from gold extraction.
/// `anchors` aligns with the ops in serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpsRecord {
    pub id: String,
    pub ops: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let content =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{}:{}", path.display(), idx + 1))
        })
        .collect()
}

fn load_corpus(path: &Path, format: Option<Format>) -> Result<Vec<DialogueSample>> {
    let format = format.unwrap_or_else(|| Format::from_path(path));
    Ok(corpus::load(path, format)?)
}

/// Indexes records by id, rejecting duplicates.
fn index_by_id<T>(records: Vec<T>, id: impl Fn(&T) -> &str, what: &str) -> Result<BTreeMap<String, T>> {
    let mut map = BTreeMap::new();
    for record in records {
        let key = id(&record).to_string();
        if map.insert(key.clone(), record).is_some() {
            bail!("duplicate {what} record for id {key:?}");
        }
    }
    Ok(map)
}

fn cmd_extract(args: &ExtractArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.input, args.format)?;
    let mut records = Vec::with_capacity(corpus.len());
    for sample in &corpus {
        let script = corpus::gold_script(sample, config.mode, &config.markers)?;
        let ops = serialize_with_markers(&script, config.layout, &config.markers)
            .with_context(|| format!("sample {}", sample.id))?;
        let ordered = script.in_layout(config.layout);
        records.push(OpsRecord {
            id: sample.id.clone(),
            ops,
            anchors: Some(ordered.ops.iter().map(|op| op.anchor()).collect()),
            source_len: script.source_len,
        });
    }
    let out = config.output_path(args.out.as_deref(), "ops.jsonl");
    write_jsonl(&out, &records)?;
    Ok(Outcome::clean(corpus.len(), config.policy == Policy::Strict))
}

fn cmd_apply(args: &ApplyArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.input, args.format)?;
    let strict = config.policy == Policy::Strict;
    let strategy = args.strategy.unwrap_or(config.strategy);
    let mut ops_by_id = index_by_id(read_jsonl::<OpsRecord>(&args.ops)?, |r| &r.id, "ops")?;
    let mut records = Vec::with_capacity(corpus.len());
    let mut repairs = 0usize;
    for sample in &corpus {
        let incomplete = tokenize_with_markers(&sample.incomplete, config.mode, &config.markers);
        let Some(record) = ops_by_id.remove(&sample.id) else {
            if strict {
                bail!("no ops record for sample {:?}", sample.id);
            }
            repairs += 1;
            records.push(PredictionRecord {
                id: sample.id.clone(),
                prediction: incomplete.detokenize(),
            });
            continue;
        };
        let parsed = parse_with(&record.ops, config.mode, config.policy, &config.markers)
            .with_context(|| format!("sample {}", sample.id))?;
        repairs += parsed.diagnostics.len();
        let mut script = parsed.script;
        match record.anchors {
            Some(anchors) if anchors.len() == script.ops.len() => {
                for (op, anchor) in script.ops.iter_mut().zip(anchors) {
                    op.set_anchor(anchor);
                }
                script.source_len = record.source_len;
            }
            Some(anchors) => {
                if strict {
                    bail!(
                        "sample {}: {} anchors for {} ops",
                        sample.id,
                        anchors.len(),
                        script.ops.len()
                    );
                }
                repairs += 1;
            }
            None => {}
        }
        let mut stream = rng::stream(config.seed, &sample.id);
        let applied = apply(&incomplete, &script, strategy, &mut stream, config.policy)
            .with_context(|| format!("sample {}", sample.id))?;
        repairs += applied.skipped;
        records.push(PredictionRecord {
            id: sample.id.clone(),
            prediction: applied.utterance.detokenize(),
        });
    }
    if !ops_by_id.is_empty() {
        let ids: Vec<&String> = ops_by_id.keys().take(3).collect();
        if strict {
            bail!(
                "{} ops records match no corpus sample (first: {ids:?})",
                ops_by_id.len()
            );
        }
        repairs += ops_by_id.len();
    }
    let out = config.output_path(args.out.as_deref(), "predictions.jsonl");
    write_jsonl(&out, &records)?;
    Ok(Outcome {
        total: corpus.len(),
        failures: 0,
        repairs,
        strict,
        quiet: false,
    })
}

fn cmd_prepare(args: &PrepareArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.input, args.format)?;
    let examples = match args.stage {
        1 => corpus::build_stage1(&corpus, config.mode, config.layout, &config.markers)?,
        2 => match &args.ops {
            Some(ops_path) => {
                let records = read_jsonl::<OpsRecord>(ops_path)?;
                let map: BTreeMap<String, String> = index_by_id(records, |r| &r.id, "ops")?
                    .into_iter()
                    .map(|(id, record)| (id, record.ops))
                    .collect();
                corpus::build_stage2_from_predictions(&corpus, &map, &config.markers)?
            }
            None => corpus::build_stage2(
                &corpus,
                &config.perturb,
                !args.empty_ops,
                config.mode,
                config.layout,
                &config.markers,
            )?,
        },
        _ => unreachable!("clap restricts --stage to 1..=2"),
    };
    let default_name = format!("stage{}.jsonl", args.stage);
    let out = config.output_path(args.out.as_deref(), &default_name);
    write_jsonl(&out, &examples)?;
    Ok(Outcome::clean(corpus.len(), config.policy == Policy::Strict))
}

fn cmd_infer(args: &InferArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.input, args.format)?;
    let variant = args.variant.unwrap_or_default();
    let opts = RunOptions {
        stage1: &config.backends.stage1,
        stage2: &config.backends.stage2,
        mode: config.mode,
        layout: config.layout,
        markers: &config.markers,
        seed: config.seed,
        concurrency: config.concurrency,
    };
    let run = engine::run_two_stage(&corpus, variant, &opts)?;
    for outcome in run.samples.iter().filter(|s| s.failed()) {
        for error in &outcome.errors {
            eprintln!("sample {}: {error}", outcome.id);
        }
    }
    let predictions: Vec<PredictionRecord> = run
        .samples
        .iter()
        .map(|s| PredictionRecord {
            id: s.id.clone(),
            prediction: s.prediction.detokenize(),
        })
        .collect();
    let out = config.output_path(args.out.as_deref(), "predictions.jsonl");
    write_jsonl(&out, &predictions)?;
    if let Some(ops_out) = &args.ops_out {
        let ops: Vec<OpsRecord> = run
            .samples
            .iter()
            .map(|s| OpsRecord {
                id: s.id.clone(),
                ops: s.stage1_ops_raw.clone(),
                anchors: None,
                source_len: None,
            })
            .collect();
        write_jsonl(ops_out, &ops)?;
    }
    Ok(Outcome {
        total: corpus.len(),
        failures: run.failed_count(),
        repairs: run.skipped_op_count(),
        strict: config.policy == Policy::Strict,
        quiet: false,
    })
}

/// Tokenized (incomplete, prediction, reference) columns for scoring.
type ScoringColumns = (Vec<TokenSeq>, Vec<TokenSeq>, Vec<TokenSeq>);

fn scoring_columns(
    corpus: &[DialogueSample],
    predictions: &BTreeMap<String, PredictionRecord>,
    config: &Config,
) -> Result<ScoringColumns> {
    let mut incompletes = Vec::with_capacity(corpus.len());
    let mut preds = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    for sample in corpus {
        let record = predictions
            .get(&sample.id)
            .with_context(|| format!("no prediction for sample {:?}", sample.id))?;
        let rewritten = sample
            .rewritten
            .as_deref()
            .with_context(|| format!("sample {:?} has no reference rewrite", sample.id))?;
        incompletes.push(tokenize_with_markers(
            &sample.incomplete,
            config.mode,
            &config.markers,
        ));
        preds.push(tokenize_with_markers(
            &record.prediction,
            config.mode,
            &config.markers,
        ));
        refs.push(tokenize_with_markers(rewritten, config.mode, &config.markers));
    }
    Ok((incompletes, preds, refs))
}

#[derive(Serialize)]
struct ReportEnvelope<'a> {
    config: &'a Config,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn emit_report(report: &EvalReport, config: &Config, out: Option<&Path>) -> Result<()> {
    let envelope = ReportEnvelope { config, report };
    let json = serde_json::to_string_pretty(&envelope)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(path, format!("{json}\n"))
                .with_context(|| format!("writing {}", path.display()))
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_eval(args: &EvalArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.data, args.format)?;
    let predictions = index_by_id(
        read_jsonl::<PredictionRecord>(&args.pred)?,
        |r| &r.id,
        "prediction",
    )?;
    let (incompletes, preds, refs) = scoring_columns(&corpus, &predictions, config)?;
    let report = metrics::evaluate(&incompletes, &preds, &refs, &config.metric_orders)?;
    emit_report(&report, config, args.out.as_deref())?;
    Ok(Outcome::clean(corpus.len(), config.policy == Policy::Strict))
}

fn cmd_stats(args: &StatsArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.input, args.format)?;
    let stats = corpus::stats(&corpus, config.mode, &config.markers)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(Outcome::clean(corpus.len(), config.policy == Policy::Strict))
}

fn cmd_analyze(args: &AnalyzeArgs, config: &Config) -> Result<Outcome> {
    let corpus = load_corpus(&args.data, args.format)?;
    let ops = index_by_id(read_jsonl::<OpsRecord>(&args.stage1)?, |r| &r.id, "ops")?;
    let predictions = index_by_id(
        read_jsonl::<PredictionRecord>(&args.pred)?,
        |r| &r.id,
        "prediction",
    )?;
    let mut samples = Vec::with_capacity(corpus.len());
    for sample in &corpus {
        let ops_record = ops
            .get(&sample.id)
            .with_context(|| format!("no ops record for sample {:?}", sample.id))?;
        let prediction = predictions
            .get(&sample.id)
            .with_context(|| format!("no prediction for sample {:?}", sample.id))?;
        let script = parse_with(
            &ops_record.ops,
            config.mode,
            Policy::Lenient,
            &config.markers,
        )
        .expect("lenient parsing never fails")
        .script;
        samples.push(SampleOutcome {
            id: sample.id.clone(),
            stage1_ops_raw: ops_record.ops.clone(),
            stage1_script: script,
            prediction: tokenize_with_markers(
                &prediction.prediction,
                config.mode,
                &config.markers,
            ),
            skipped_ops: 0,
            errors: Vec::new(),
        });
    }
    let run = RunResult {
        variant: Variant::TwoStage,
        seed: config.seed,
        stage1: config.backends.stage1.clone(),
        stage2: config.backends.stage2.clone(),
        samples,
    };
    let analyze_opts = AnalyzeOptions {
        mode: config.mode,
        layout: config.layout,
        markers: &config.markers,
        orders: &config.metric_orders,
    };
    let report = engine::analyze(&run, &corpus, &analyze_opts)?;
    emit_report(&report, config, args.out.as_deref())?;
    Ok(Outcome::clean(corpus.len(), config.policy == Policy::Strict))
}

/// Stdin/stdout line backend: echoes each prompt back as its output,
/// optionally prefixed, delayed, or silent for chosen ids.
fn backend_echo(args: &BackendEchoArgs) -> Result<()> {
    #[derive(Deserialize)]
    struct Request {
        id: String,
        prompt: String,
    }
    let stdin = std::io::stdin().lock();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request =
            serde_json::from_str(&line).context("malformed backend request line")?;
        if args.skip_id.iter().any(|id| *id == request.id) {
            continue;
        }
        if args.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(args.delay_ms));
        }
        let output = format!("{}{}", args.prefix.as_deref().unwrap_or(""), request.prompt);
        let reply = serde_json::json!({ "id": request.id, "output": output });
        writeln!(stdout, "{reply}")?;
        stdout.flush()?;
    }
    Ok(())
}
