//! Applying edit scripts to incomplete utterances.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::Policy;
use super::{EditOp, EditScript};
use crate::text::{detokenize, TokenSeq};

/// How op positions are resolved against the utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Use the anchors stored at extraction time; requires a fully
    /// anchored script extracted from an utterance of the same length.
    #[default]
    Anchored,
    /// Locate each replacement's deleted span as the leftmost exact
    /// occurrence in the current utterance. Insertions carry no locator,
    /// so they error (strict) or are skipped (lenient).
    Matched,
    /// Replacements as under [`Strategy::Matched`]; each insertion goes to
    /// a gap drawn uniformly from the current utterance.
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "anchored" => Ok(Strategy::Anchored),
            "matched" => Ok(Strategy::Matched),
            "random" => Ok(Strategy::Random),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("op {index}: anchored application requires an anchor")]
    MissingAnchor { index: usize },
    #[error("script targets an utterance of {script:?} tokens, got {actual}")]
    SourceLenMismatch { script: Option<usize>, actual: usize },
    #[error("op {index}: anchor exceeds the utterance")]
    AnchorOutOfRange { index: usize },
    #[error("op {index}: deleted span {span:?} not found in utterance")]
    SpanNotFound { index: usize, span: String },
    #[error("op {index}: insertion has no position under the matched strategy")]
    UnplaceableInsertion { index: usize },
}

/// Application result: the rewritten utterance plus the number of ops
/// skipped under the lenient policy. Strict runs never skip.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub utterance: TokenSeq,
    pub skipped: usize,
}

/// Applies `script` to `incomplete`. Replacements are applied first, then
/// insertions in script order; the empty script is the identity under
/// every strategy. Only [`Strategy::Random`] draws from `rng`.
pub fn apply<R: Rng + ?Sized>(
    incomplete: &TokenSeq,
    script: &EditScript,
    strategy: Strategy,
    rng: &mut R,
    policy: Policy,
) -> Result<Applied, ApplyError> {
    if script.is_empty() {
        return Ok(Applied {
            utterance: incomplete.clone(),
            skipped: 0,
        });
    }
    match strategy {
        Strategy::Anchored => apply_anchored(incomplete, script),
        Strategy::Matched | Strategy::Random => {
            apply_located(incomplete, script, strategy, rng, policy)
        }
    }
}

fn apply_anchored(incomplete: &TokenSeq, script: &EditScript) -> Result<Applied, ApplyError> {
    if script.source_len != Some(incomplete.len()) {
        return Err(ApplyError::SourceLenMismatch {
            script: script.source_len,
            actual: incomplete.len(),
        });
    }
    let mut replacements: Vec<(usize, usize, &EditOp)> = Vec::new();
    let mut insertions: Vec<(usize, usize, &EditOp)> = Vec::new();
    for (index, op) in script.ops.iter().enumerate() {
        let anchor = op.anchor().ok_or(ApplyError::MissingAnchor { index })?;
        match op {
            EditOp::Replacement { deleted, .. } => {
                if anchor + deleted.len() > incomplete.len() {
                    return Err(ApplyError::AnchorOutOfRange { index });
                }
                replacements.push((anchor, index, op));
            }
            EditOp::Insertion { .. } => {
                if anchor > incomplete.len() {
                    return Err(ApplyError::AnchorOutOfRange { index });
                }
                insertions.push((anchor, index, op));
            }
        }
    }

    // Right-to-left keeps pending anchors valid while lengths shift.
    let mut out = incomplete.clone();
    replacements.sort_by(|a, b| (b.0, b.1).cmp(&(a.0, a.1)));
    for &(anchor, _, op) in &replacements {
        let deleted_len = op.deleted().map_or(0, TokenSeq::len);
        out.splice(anchor, deleted_len, &effective_insert(op));
    }

    // Insertion anchors are gaps in the original utterance; shift each by
    // the net length change of every edit applied before it. Ops sharing a
    // gap land in script order.
    let mut placed: Vec<(usize, usize)> = Vec::new();
    for &(anchor, _, op) in &insertions {
        let repl_delta: isize = replacements
            .iter()
            .filter(|&&(a, _, r)| a + r.deleted().map_or(0, TokenSeq::len) <= anchor)
            .map(|&(_, _, r)| {
                effective_insert(r).len() as isize - r.deleted().map_or(0, TokenSeq::len) as isize
            })
            .sum();
        let ins_shift: usize = placed
            .iter()
            .filter(|&&(gap, _)| gap <= anchor)
            .map(|&(_, len)| len)
            .sum();
        let pos = (anchor as isize + repl_delta) as usize + ins_shift;
        out.splice(pos, 0, op.inserted());
        placed.push((anchor, op.inserted().len()));
    }
    Ok(Applied {
        utterance: out,
        skipped: 0,
    })
}

fn apply_located<R: Rng + ?Sized>(
    incomplete: &TokenSeq,
    script: &EditScript,
    strategy: Strategy,
    rng: &mut R,
    policy: Policy,
) -> Result<Applied, ApplyError> {
    let mut out = incomplete.clone();
    let mut skipped = 0usize;
    for (index, op) in script.ops.iter().enumerate().filter(|(_, op)| op.is_replacement()) {
        let deleted = op.deleted().expect("replacement has a deleted span");
        match find_leftmost(&out, deleted) {
            Some(at) => out.splice(at, deleted.len(), &effective_insert(op)),
            None => match policy {
                Policy::Strict => {
                    return Err(ApplyError::SpanNotFound {
                        index,
                        span: detokenize(deleted),
                    })
                }
                Policy::Lenient => skipped += 1,
            },
        }
    }
    for (index, op) in script.ops.iter().enumerate().filter(|(_, op)| op.is_insertion()) {
        match strategy {
            Strategy::Random => {
                let gap = rng.random_range(0..=out.len());
                out.splice(gap, 0, op.inserted());
            }
            _ => match policy {
                Policy::Strict => return Err(ApplyError::UnplaceableInsertion { index }),
                Policy::Lenient => skipped += 1,
            },
        }
    }
    Ok(Applied {
        utterance: out,
        skipped,
    })
}

/// The tokens an op actually inserts: nothing for the pure-deletion
/// sentinel.
fn effective_insert(op: &EditOp) -> TokenSeq {
    if op.is_pure_deletion() {
        TokenSeq::empty()
    } else {
        op.inserted().clone()
    }
}

fn find_leftmost(haystack: &TokenSeq, needle: &TokenSeq) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .find(|&at| haystack.slice(at, at + needle.len()).same_surfaces(needle))
}
