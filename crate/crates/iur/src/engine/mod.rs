//! Two-stage orchestration over a corpus: obtain an edit-ops string per
//! sample (stage 1), then turn it into a rewrite (stage 2), either by
//! prompting a second backend with the ops in its input or by applying the
//! parsed script directly. [`analyze`] scores a finished run and correlates
//! per-sample stage-1 script accuracy with final rewrite accuracy.

pub mod backend;

pub use backend::{Backend, BackendError, BackendKind, BackendSpec, BackendSpecError};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, DialogueSample};
use crate::editscript::{
    apply, extract_with_markers, parse_with, serialize_with_markers, EditScript, Layout, Policy,
    Strategy,
};
use crate::metrics::{self, EvalReport, MetricsError, StageMatrix};
use crate::rng;
use crate::text::{tokenize_with_markers, Markers, TokenSeq, TokenizeMode};

/// How the pipeline turns a sample into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Stage-1 backend produces ops; stage-2 backend sees them in its
    /// prompt and produces the rewrite.
    #[default]
    TwoStage,
    /// No stage-2 call: parsed stage-1 ops are applied directly, with
    /// replacements matched in the utterance and insertion positions drawn
    /// uniformly at random.
    Stage1Only,
    /// Replacements are applied directly; only the insertion ops are
    /// forwarded to stage 2, prompted with the partially rewritten
    /// utterance.
    ReplaceThenInsert,
    /// Stage 2 sees the gold ops; the stage-1 backend is never called.
    GoldOps,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "two-stage" | "twostage" => Ok(Variant::TwoStage),
            "stage1-only" | "stage1only" | "stage1" => Ok(Variant::Stage1Only),
            "replace-then-insert" => Ok(Variant::ReplaceThenInsert),
            "gold-ops" | "goldops" | "gold" => Ok(Variant::GoldOps),
            other => Err(format!(
                "unknown variant {other:?}; expected two-stage, stage1-only, \
                 replace-then-insert, or gold-ops"
            )),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::TwoStage => "two-stage",
            Variant::Stage1Only => "stage1-only",
            Variant::ReplaceThenInsert => "replace-then-insert",
            Variant::GoldOps => "gold-ops",
        })
    }
}

/// Everything a run needs besides the corpus and variant.
#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    pub stage1: &'a BackendSpec,
    pub stage2: &'a BackendSpec,
    pub mode: TokenizeMode,
    pub layout: Layout,
    pub markers: &'a Markers,
    pub seed: u64,
    pub concurrency: usize,
}

/// One per input sample, ids preserved. A sample whose backend calls
/// failed keeps an empty prediction and lists what went wrong; lenient
/// skips during direct application are counted separately because they
/// are expected behavior, not failures.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub id: String,
    pub stage1_ops_raw: String,
    pub stage1_script: EditScript,
    pub prediction: TokenSeq,
    pub skipped_ops: usize,
    pub errors: Vec<String>,
}

impl SampleOutcome {
    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub stage1: BackendSpec,
    pub stage2: BackendSpec,
    pub samples: Vec<SampleOutcome>,
}

impl RunResult {
    pub fn failed_count(&self) -> usize {
        self.samples.iter().filter(|s| s.failed()).count()
    }

    pub fn skipped_op_count(&self) -> usize {
        self.samples.iter().map(|s| s.skipped_ops).sum()
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("all {count} samples failed; first error: {first}")]
    AllSamplesFailed { count: usize, first: String },
    #[error("no run record for sample {id}")]
    MissingRecord { id: String },
}

enum Slot {
    Stage1,
    Stage2,
}

/// Builds a ready backend for one pipeline slot. `gold` resolves to the
/// serialized gold script (stage 1) or the gold rewrite (stage 2);
/// `identity` to the incomplete utterance.
fn resolve<'a>(
    spec: &'a BackendSpec,
    slot: Slot,
    corpus: &[DialogueSample],
    opts: &RunOptions,
) -> Result<Backend<'a>, EngineError> {
    let fixed = match spec.kind {
        BackendKind::Gold => {
            let mut map = BTreeMap::new();
            for sample in corpus {
                let out = match slot {
                    Slot::Stage1 => {
                        corpus::gold_ops(sample, opts.mode, opts.layout, opts.markers)?
                    }
                    Slot::Stage2 => sample.rewritten.clone().ok_or_else(|| {
                        CorpusError::MissingRewritten {
                            id: sample.id.clone(),
                        }
                    })?,
                };
                map.insert(sample.id.clone(), out);
            }
            Some(map)
        }
        BackendKind::Identity => Some(
            corpus
                .iter()
                .map(|s| (s.id.clone(), s.incomplete.clone()))
                .collect(),
        ),
        _ => None,
    };
    Ok(Backend::new(spec, fixed, opts.concurrency)?)
}

/// Runs one pipeline variant over the corpus. Backend failures are
/// recorded per sample (prediction left empty); the run itself fails only
/// when every sample failed.
pub fn run_two_stage(
    corpus: &[DialogueSample],
    variant: Variant,
    opts: &RunOptions,
) -> Result<RunResult, EngineError> {
    let n = corpus.len();
    let mut errors: Vec<Vec<String>> = vec![Vec::new(); n];
    let mut skipped: Vec<usize> = vec![0; n];
    let mut ops_raw: Vec<Option<String>> = vec![None; n];

    // Stage 1: one raw ops string per sample.
    if variant == Variant::GoldOps {
        for (i, sample) in corpus.iter().enumerate() {
            ops_raw[i] = Some(corpus::gold_ops(sample, opts.mode, opts.layout, opts.markers)?);
        }
    } else {
        let prompts: Vec<(String, String)> = corpus
            .iter()
            .map(|s| (s.id.clone(), corpus::stage1_input(s, opts.markers)))
            .collect();
        let backend = resolve(opts.stage1, Slot::Stage1, corpus, opts)?;
        let mut outs = backend.generate(&prompts)?;
        for (i, sample) in corpus.iter().enumerate() {
            match outs.remove(&sample.id) {
                Some(Ok(text)) => ops_raw[i] = Some(text),
                Some(Err(e)) => errors[i].push(format!("stage 1: {e}")),
                None => errors[i].push("stage 1: no backend reply".to_string()),
            }
        }
    }

    // The parsed form of whatever stage 1 produced, kept for analysis and
    // used directly by the non-generative variants. Lenient parsing is
    // total, so arbitrary backend noise still yields a script.
    let scripts: Vec<EditScript> = ops_raw
        .iter()
        .map(|raw| match raw {
            Some(text) => {
                parse_with(text, opts.mode, Policy::Lenient, opts.markers)
                    .expect("lenient parsing never fails")
                    .script
            }
            None => EditScript::default(),
        })
        .collect();

    let mut predictions: Vec<Option<TokenSeq>> = vec![None; n];
    match variant {
        Variant::TwoStage | Variant::GoldOps => {
            let prompts: Vec<(String, String)> = corpus
                .iter()
                .enumerate()
                .filter_map(|(i, sample)| {
                    let raw = ops_raw[i].as_deref()?;
                    Some((sample.id.clone(), corpus::stage2_input(sample, raw, opts.markers)))
                })
                .collect();
            let backend = resolve(opts.stage2, Slot::Stage2, corpus, opts)?;
            let mut outs = backend.generate(&prompts)?;
            for (i, sample) in corpus.iter().enumerate() {
                if ops_raw[i].is_none() {
                    continue;
                }
                match outs.remove(&sample.id) {
                    Some(Ok(text)) => {
                        predictions[i] =
                            Some(tokenize_with_markers(&text, opts.mode, opts.markers));
                    }
                    Some(Err(e)) => errors[i].push(format!("stage 2: {e}")),
                    None => errors[i].push("stage 2: no backend reply".to_string()),
                }
            }
        }
        Variant::Stage1Only => {
            for (i, sample) in corpus.iter().enumerate() {
                if ops_raw[i].is_none() {
                    continue;
                }
                let incomplete =
                    tokenize_with_markers(&sample.incomplete, opts.mode, opts.markers);
                let mut stream = rng::stream(opts.seed, &sample.id);
                match apply(
                    &incomplete,
                    &scripts[i],
                    Strategy::Random,
                    &mut stream,
                    Policy::Lenient,
                ) {
                    Ok(applied) => {
                        skipped[i] = applied.skipped;
                        predictions[i] = Some(applied.utterance);
                    }
                    Err(e) => errors[i].push(format!("apply: {e}")),
                }
            }
        }
        Variant::ReplaceThenInsert => {
            let mut prompts: Vec<(String, String)> = Vec::new();
            for (i, sample) in corpus.iter().enumerate() {
                if ops_raw[i].is_none() {
                    continue;
                }
                let (replacements, insertions) = scripts[i].split_by_kind();
                let incomplete =
                    tokenize_with_markers(&sample.incomplete, opts.mode, opts.markers);
                let mut stream = rng::stream(opts.seed, &sample.id);
                let applied = match apply(
                    &incomplete,
                    &replacements,
                    Strategy::Matched,
                    &mut stream,
                    Policy::Lenient,
                ) {
                    Ok(applied) => applied,
                    Err(e) => {
                        errors[i].push(format!("apply: {e}"));
                        continue;
                    }
                };
                skipped[i] = applied.skipped;
                let ops = match serialize_with_markers(&insertions, opts.layout, opts.markers) {
                    Ok(ops) => ops,
                    Err(e) => {
                        errors[i].push(format!("serialize insertions: {e}"));
                        continue;
                    }
                };
                prompts.push((
                    sample.id.clone(),
                    corpus::prompt_input(
                        opts.markers,
                        &sample.history,
                        &applied.utterance.detokenize(),
                        Some(&ops),
                    ),
                ));
            }
            let backend = resolve(opts.stage2, Slot::Stage2, corpus, opts)?;
            let mut outs = backend.generate(&prompts)?;
            for (i, sample) in corpus.iter().enumerate() {
                if ops_raw[i].is_none() || !errors[i].is_empty() {
                    continue;
                }
                match outs.remove(&sample.id) {
                    Some(Ok(text)) => {
                        predictions[i] =
                            Some(tokenize_with_markers(&text, opts.mode, opts.markers));
                    }
                    Some(Err(e)) => errors[i].push(format!("stage 2: {e}")),
                    None => errors[i].push("stage 2: no backend reply".to_string()),
                }
            }
        }
    }

    let samples: Vec<SampleOutcome> = corpus
        .iter()
        .enumerate()
        .map(|(i, sample)| SampleOutcome {
            id: sample.id.clone(),
            stage1_ops_raw: ops_raw[i].clone().unwrap_or_default(),
            stage1_script: scripts[i].clone(),
            prediction: predictions[i].take().unwrap_or_default(),
            skipped_ops: skipped[i],
            errors: std::mem::take(&mut errors[i]),
        })
        .collect();

    let failed = samples.iter().filter(|s| s.failed()).count();
    if n > 0 && failed == n {
        let first = samples
            .iter()
            .flat_map(|s| s.errors.first().cloned())
            .next()
            .unwrap_or_default();
        return Err(EngineError::AllSamplesFailed { count: n, first });
    }
    Ok(RunResult {
        variant,
        seed: opts.seed,
        stage1: opts.stage1.clone(),
        stage2: opts.stage2.clone(),
        samples,
    })
}

/// Scoring knobs for [`analyze`].
#[derive(Debug, Clone)]
pub struct AnalyzeOptions<'a> {
    pub mode: TokenizeMode,
    pub layout: Layout,
    pub markers: &'a Markers,
    pub orders: &'a [usize],
}

/// Scores a run against its corpus: the full metric suite, plus stage-1
/// exact match (parsed ops equal the gold script modulo anchors, in the
/// configured layout's order), the 2x2 stage-correctness matrix, and the
/// corrected/corrupted rates between the stages.
pub fn analyze(
    run: &RunResult,
    corpus: &[DialogueSample],
    opts: &AnalyzeOptions,
) -> Result<EvalReport, EngineError> {
    let by_id: BTreeMap<&str, &SampleOutcome> =
        run.samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut incompletes = Vec::with_capacity(corpus.len());
    let mut predictions = Vec::with_capacity(corpus.len());
    let mut references = Vec::with_capacity(corpus.len());
    let mut pairs = Vec::with_capacity(corpus.len());
    for sample in corpus {
        let outcome = by_id
            .get(sample.id.as_str())
            .ok_or_else(|| EngineError::MissingRecord {
                id: sample.id.clone(),
            })?;
        let rewritten = sample
            .rewritten
            .as_deref()
            .ok_or_else(|| CorpusError::MissingRewritten {
                id: sample.id.clone(),
            })?;
        let incomplete = tokenize_with_markers(&sample.incomplete, opts.mode, opts.markers);
        let reference = tokenize_with_markers(rewritten, opts.mode, opts.markers);
        let gold =
            extract_with_markers(&incomplete, &reference, opts.markers).in_layout(opts.layout);
        let stage1_ok = outcome.stage1_script.same_ops(&gold);
        let stage2_ok = outcome.prediction.same_surfaces(&reference);
        pairs.push((stage1_ok, stage2_ok));
        incompletes.push(incomplete);
        predictions.push(outcome.prediction.clone());
        references.push(reference);
    }
    let mut report = metrics::evaluate(&incompletes, &predictions, &references, opts.orders)?;
    let (e2c, c2e) = metrics::e2c_c2e(&pairs)?;
    report.e2c = e2c;
    report.c2e = c2e;
    report.stage1_em =
        Some(pairs.iter().filter(|p| p.0).count() as f64 / pairs.len() as f64);
    report.stage_matrix = Some(StageMatrix::from_pairs(&pairs));
    Ok(report)
}
