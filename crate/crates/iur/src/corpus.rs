//! Dialogue corpora on disk and model input preparation.
//!
//! A sample is a dialogue history, the incomplete current utterance, and
//! optionally its gold rewrite. Corpora live as line-delimited JSON (one
//! object per line) or TSV (history columns, then the incomplete utterance,
//! then the rewrite). From a corpus this module builds the prompt files the
//! two generation stages consume:
//!
//! * stage 1 sees `[CLS] history… [SEP] incomplete [SEP]` and targets the
//!   serialized gold edit script;
//! * stage 2 additionally gets an ops slot (`… ops [SEP]`) filled with
//!   perturbed gold ops for training or raw stage-1 output for inference,
//!   and targets the rewritten utterance.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editscript::{
    extract_with_markers, serialize_with_markers, EditScript, Layout, SerializeError,
};
use crate::perturb::{perturb, PerturbConfig, PerturbError};
use crate::rng;
use crate::text::{tokenize_with_markers, Markers, TokenizeMode};

/// One dialogue sample: what was said before, the utterance to restore, and
/// optionally its self-contained rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: String,
    pub history: Vec<String>,
    pub incomplete: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rewritten: Option<String>,
}

/// On-disk corpus format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Tsv,
}

impl Format {
    /// Picks the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => Format::Tsv,
            _ => Format::Jsonl,
        }
    }
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Format::Jsonl),
            "tsv" => Ok(Format::Tsv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("corpus file {path} contains no samples")]
    EmptyFile { path: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sample {id}: rewritten utterance required")]
    MissingRewritten { id: String },
    #[error("sample {id}: no predicted ops supplied")]
    MissingOps { id: String },
    #[error("sample {id}: {source}")]
    Serialize {
        id: String,
        #[source]
        source: SerializeError,
    },
    #[error("sample {id}: {source}")]
    Perturb {
        id: String,
        #[source]
        source: PerturbError,
    },
}

#[derive(Deserialize)]
struct RawSample {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    history: Vec<String>,
    incomplete: String,
    #[serde(default)]
    rewritten: Option<String>,
}

/// Loads a corpus. JSONL lines carry `history` (array), `incomplete`,
/// optional `rewritten` and optional `id` (defaulting to the line number).
/// TSV lines are utterance columns: the last is the rewrite, the
/// second-to-last the incomplete utterance, the rest the history. Empty
/// rewrites are normalized to absent.
pub fn load(path: &Path, format: Format) -> Result<Vec<DialogueSample>, CorpusError> {
    let display = path.display().to_string();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    let mut samples = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| CorpusError::Malformed {
            path: display.clone(),
            line: line_no,
            message,
        };
        let sample = match format {
            Format::Jsonl => {
                let raw: RawSample =
                    serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
                DialogueSample {
                    id: raw.id.unwrap_or_else(|| line_no.to_string()),
                    history: raw.history,
                    incomplete: raw.incomplete,
                    rewritten: raw.rewritten.filter(|r| !r.trim().is_empty()),
                }
            }
            Format::Tsv => {
                let mut cols: Vec<&str> = line.split('\t').collect();
                if cols.len() < 2 {
                    return Err(malformed(format!(
                        "expected at least 2 tab-separated columns, got {}",
                        cols.len()
                    )));
                }
                let rewritten = cols.pop().unwrap().trim();
                let incomplete = cols.pop().unwrap().trim().to_string();
                DialogueSample {
                    id: line_no.to_string(),
                    history: cols.iter().map(|c| c.trim().to_string()).collect(),
                    incomplete,
                    rewritten: (!rewritten.is_empty()).then(|| rewritten.to_string()),
                }
            }
        };
        if sample.incomplete.trim().is_empty() {
            return Err(malformed("incomplete utterance is empty".to_string()));
        }
        if !seen.insert(sample.id.clone()) {
            return Err(malformed(format!("duplicate sample id {:?}", sample.id)));
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(CorpusError::EmptyFile { path: display });
    }
    Ok(samples)
}

/// Writes the canonical JSONL form, one sample per line.
pub fn save(samples: &[DialogueSample], path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for sample in samples {
        out.push_str(&serde_json::to_string(sample).expect("sample serialization is infallible"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Corpus-level statistics: average token lengths of the concatenated
/// history, the incomplete utterance and the rewrite, plus total edit-op
/// counts over the extracted gold scripts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorpusStats {
    pub n_samples: usize,
    pub avg_cont_len: f64,
    pub avg_curr_len: f64,
    pub avg_rewr_len: f64,
    pub n_insertion: usize,
    pub n_replacement: usize,
}

pub fn stats(
    samples: &[DialogueSample],
    mode: TokenizeMode,
    markers: &Markers,
) -> Result<CorpusStats, CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut cont = 0usize;
    let mut curr = 0usize;
    let mut rewr = 0usize;
    let mut n_insertion = 0usize;
    let mut n_replacement = 0usize;
    for sample in samples {
        let rewritten = sample
            .rewritten
            .as_deref()
            .ok_or_else(|| CorpusError::MissingRewritten {
                id: sample.id.clone(),
            })?;
        cont += tokenize_with_markers(&sample.history.join(" "), mode, markers).len();
        let inc = tokenize_with_markers(&sample.incomplete, mode, markers);
        let rew = tokenize_with_markers(rewritten, mode, markers);
        curr += inc.len();
        rewr += rew.len();
        let script = extract_with_markers(&inc, &rew, markers);
        n_insertion += script.insertion_count();
        n_replacement += script.replacement_count();
    }
    let n = samples.len() as f64;
    Ok(CorpusStats {
        n_samples: samples.len(),
        avg_cont_len: cont as f64 / n,
        avg_curr_len: curr as f64 / n,
        avg_rewr_len: rewr as f64 / n,
        n_insertion,
        n_replacement,
    })
}

/// Which preparation produced an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreparedVariant {
    Stage1,
    Stage2,
    Stage2FromPredictions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedMeta {
    pub perturbed: bool,
    pub variant: PreparedVariant,
}

/// One model prompt with its optional training target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedExample {
    pub id: String,
    pub input: String,
    pub target: Option<String>,
    pub meta: PreparedMeta,
}

/// Builds a prompt string: `[CLS]`, each history utterance followed by
/// `[SEP]`, the current utterance followed by `[SEP]`, and, when an ops
/// slot is requested, its content followed by one more `[SEP]` (the
/// separator stays even when the content is empty). Parts are joined by
/// single spaces; empty history utterances are skipped.
pub fn prompt_input(
    markers: &Markers,
    history: &[String],
    current: &str,
    ops: Option<&str>,
) -> String {
    let mut parts: Vec<&str> = vec![&markers.cls];
    for h in history {
        let h = h.trim();
        if !h.is_empty() {
            parts.push(h);
        }
        parts.push(&markers.sep);
    }
    parts.push(current.trim());
    parts.push(&markers.sep);
    if let Some(ops) = ops {
        let ops = ops.trim();
        if !ops.is_empty() {
            parts.push(ops);
        }
        parts.push(&markers.sep);
    }
    parts.join(" ")
}

pub fn stage1_input(sample: &DialogueSample, markers: &Markers) -> String {
    prompt_input(markers, &sample.history, &sample.incomplete, None)
}

pub fn stage2_input(sample: &DialogueSample, ops: &str, markers: &Markers) -> String {
    prompt_input(markers, &sample.history, &sample.incomplete, Some(ops))
}

/// Stage-1 examples: prompt without an ops slot, target the serialized
/// gold script. Requires every sample to carry its rewrite.
pub fn build_stage1(
    samples: &[DialogueSample],
    mode: TokenizeMode,
    layout: Layout,
    markers: &Markers,
) -> Result<Vec<PreparedExample>, CorpusError> {
    samples
        .iter()
        .map(|sample| {
            let ops = gold_ops(sample, mode, layout, markers)?;
            Ok(PreparedExample {
                id: sample.id.clone(),
                input: stage1_input(sample, markers),
                target: Some(ops),
                meta: PreparedMeta {
                    perturbed: false,
                    variant: PreparedVariant::Stage1,
                },
            })
        })
        .collect()
}

/// The extracted gold script of one sample, anchored and carrying the
/// incomplete utterance's token count.
pub fn gold_script(
    sample: &DialogueSample,
    mode: TokenizeMode,
    markers: &Markers,
) -> Result<EditScript, CorpusError> {
    let rewritten = sample
        .rewritten
        .as_deref()
        .ok_or_else(|| CorpusError::MissingRewritten {
            id: sample.id.clone(),
        })?;
    let inc = tokenize_with_markers(&sample.incomplete, mode, markers);
    let rew = tokenize_with_markers(rewritten, mode, markers);
    Ok(extract_with_markers(&inc, &rew, markers))
}

/// The serialized gold script of one sample.
pub fn gold_ops(
    sample: &DialogueSample,
    mode: TokenizeMode,
    layout: Layout,
    markers: &Markers,
) -> Result<String, CorpusError> {
    let script = gold_script(sample, mode, markers)?;
    serialize_with_markers(&script, layout, markers).map_err(|source| CorpusError::Serialize {
        id: sample.id.clone(),
        source,
    })
}

/// Stage-2 training examples: prompt with an ops slot, target the rewrite.
/// With `use_gold_ops` the slot holds the gold script perturbed under a
/// per-sample stream seeded from `cfg.seed` and the sample id; otherwise
/// the slot stays empty and the target is the rewrite when present.
pub fn build_stage2(
    samples: &[DialogueSample],
    cfg: &PerturbConfig,
    use_gold_ops: bool,
    mode: TokenizeMode,
    layout: Layout,
    markers: &Markers,
) -> Result<Vec<PreparedExample>, CorpusError> {
    samples
        .iter()
        .map(|sample| {
            if !use_gold_ops {
                return Ok(PreparedExample {
                    id: sample.id.clone(),
                    input: stage2_input(sample, "", markers),
                    target: sample.rewritten.clone(),
                    meta: PreparedMeta {
                        perturbed: false,
                        variant: PreparedVariant::Stage2,
                    },
                });
            }
            let rewritten =
                sample
                    .rewritten
                    .as_deref()
                    .ok_or_else(|| CorpusError::MissingRewritten {
                        id: sample.id.clone(),
                    })?;
            let inc = tokenize_with_markers(&sample.incomplete, mode, markers);
            let rew = tokenize_with_markers(rewritten, mode, markers);
            let history = tokenize_with_markers(&sample.history.join(" "), mode, markers);
            let gold = extract_with_markers(&inc, &rew, markers);
            let mut stream = rng::stream(cfg.seed, &sample.id);
            let outcome = perturb(&gold, &history, &inc, cfg, &mut stream).map_err(|source| {
                CorpusError::Perturb {
                    id: sample.id.clone(),
                    source,
                }
            })?;
            let ops = serialize_with_markers(&outcome.script, layout, markers).map_err(
                |source| CorpusError::Serialize {
                    id: sample.id.clone(),
                    source,
                },
            )?;
            Ok(PreparedExample {
                id: sample.id.clone(),
                input: stage2_input(sample, &ops, markers),
                target: Some(rewritten.to_string()),
                meta: PreparedMeta {
                    perturbed: outcome.fired,
                    variant: PreparedVariant::Stage2,
                },
            })
        })
        .collect()
}

/// Stage-2 inference examples: the raw predicted ops string goes into the
/// ops slot verbatim (modulo edge whitespace) and there is no target.
pub fn build_stage2_from_predictions(
    samples: &[DialogueSample],
    predicted_ops: &BTreeMap<String, String>,
    markers: &Markers,
) -> Result<Vec<PreparedExample>, CorpusError> {
    samples
        .iter()
        .map(|sample| {
            let ops = predicted_ops
                .get(&sample.id)
                .ok_or_else(|| CorpusError::MissingOps {
                    id: sample.id.clone(),
                })?;
            Ok(PreparedExample {
                id: sample.id.clone(),
                input: stage2_input(sample, ops, markers),
                target: None,
                meta: PreparedMeta {
                    perturbed: false,
                    variant: PreparedVariant::Stage2FromPredictions,
                },
            })
        })
        .collect()
}

/// Writes prepared examples as JSONL (`{"id","input","target","meta"}`).
pub fn save_prepared(examples: &[PreparedExample], path: &Path) -> Result<(), CorpusError> {
    let mut file = fs::File::create(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for example in examples {
        let line =
            serde_json::to_string(example).expect("prepared example serialization is infallible");
        writeln!(file, "{line}").map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

pub fn load_prepared(path: &Path) -> Result<Vec<PreparedExample>, CorpusError> {
    let display = path.display().to_string();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: display.clone(),
        source,
    })?;
    content
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
                path: display.clone(),
                line: idx + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
