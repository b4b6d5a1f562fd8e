//! Seeded perturbation of gold edit scripts.
//!
//! Stage-2 models train on gold edit scripts but run on noisy predicted
//! ones. To close that gap, training scripts are corrupted with the kinds
//! of mistakes stage 1 actually makes: inserted spans swapped for random
//! history spans, ops dropped outright, and spurious ops appended.
//!
//! Draw order is pinned so outputs are a pure function of the inputs and
//! the stream: for each op in script order draw `p1` then `p2` (plus the
//! two span draws when the rewrite branch fires), then draw `p3`, then the
//! append draws (origin span, new span, op kind). All probability draws
//! come from [`crate::rng::unit_draw`], so a probability of 0 never fires
//! and 1 always fires.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editscript::{EditOp, EditScript};
use crate::text::TokenSeq;

/// Perturbation intensity knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    /// Probability that an op is perturbed at all, and that an op is
    /// appended.
    pub prob_p: f64,
    /// Probability that a perturbed op has its span resampled rather than
    /// being dropped.
    pub prob_r: f64,
    /// Longest sampled span, in tokens.
    pub max_span_len: usize,
    /// Base seed for the per-sample perturbation streams.
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            prob_p: 0.6,
            prob_r: 0.5,
            max_span_len: 5,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if !(0.0..=1.0).contains(&self.prob_p) || !self.prob_p.is_finite() {
            return Err(PerturbError::InvalidConfig(format!(
                "prob_p must lie in [0, 1], got {}",
                self.prob_p
            )));
        }
        if !(0.0..=1.0).contains(&self.prob_r) || !self.prob_r.is_finite() {
            return Err(PerturbError::InvalidConfig(format!(
                "prob_r must lie in [0, 1], got {}",
                self.prob_r
            )));
        }
        if self.max_span_len == 0 {
            return Err(PerturbError::InvalidConfig(
                "max_span_len must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("invalid perturbation config: {0}")]
    InvalidConfig(String),
    #[error("cannot sample a span from an empty sequence")]
    EmptySource,
    #[error("perturbation fired but the dialogue history is empty")]
    EmptyHistory,
    #[error("perturbation fired but the incomplete utterance is empty")]
    EmptyIncomplete,
}

/// Perturbation outcome. `fired` records whether any branch fired, even
/// when the sampled text happens to equal the original.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub script: EditScript,
    pub fired: bool,
}

/// Draws a contiguous span from `source`: start uniform over all token
/// positions, then length uniform over `1..=min(max_len, remaining)`.
pub fn sample_span<R: Rng + ?Sized>(
    source: &TokenSeq,
    rng: &mut R,
    max_len: usize,
) -> Result<TokenSeq, PerturbError> {
    if source.is_empty() {
        return Err(PerturbError::EmptySource);
    }
    let start = rng.random_range(0..source.len());
    let len = rng.random_range(1..=max_len.max(1).min(source.len() - start));
    Ok(source.slice(start, start + len))
}

/// Corrupts `script` in place of stage-1 noise. For each op: with
/// probability `prob_p * prob_r` its inserted span is resampled from the
/// history, with probability `prob_p * (1 - prob_r)` the op is dropped,
/// otherwise it passes through unchanged. Afterwards, with probability
/// `prob_p`, one spurious op is appended: a span is drawn from the
/// incomplete utterance and another from the history, then an insertion of
/// the new span or a replacement of the origin span by it is chosen
/// uniformly.
///
/// Modified and appended ops carry no anchors; untouched ops pass through
/// verbatim, so `prob_p = 0` reproduces the input exactly. The input is
/// never mutated.
pub fn perturb<R: Rng + ?Sized>(
    script: &EditScript,
    history: &TokenSeq,
    incomplete: &TokenSeq,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<Perturbation, PerturbError> {
    cfg.validate()?;
    let mut ops = Vec::with_capacity(script.len() + 1);
    let mut fired = false;
    for op in &script.ops {
        let p1 = crate::rng::unit_draw(rng);
        let p2 = crate::rng::unit_draw(rng);
        if p1 <= cfg.prob_p && p2 <= cfg.prob_r {
            fired = true;
            let span = history_span(history, rng, cfg.max_span_len)?;
            ops.push(match op {
                EditOp::Insertion { .. } => EditOp::insertion(span),
                EditOp::Replacement { deleted, .. } => {
                    EditOp::replacement(deleted.clone(), span)
                }
            });
        } else if p1 <= cfg.prob_p {
            fired = true;
        } else {
            ops.push(op.clone());
        }
    }
    let p3 = crate::rng::unit_draw(rng);
    if p3 <= cfg.prob_p {
        fired = true;
        if incomplete.is_empty() {
            return Err(PerturbError::EmptyIncomplete);
        }
        let origin = sample_span(incomplete, rng, cfg.max_span_len)?;
        let new = history_span(history, rng, cfg.max_span_len)?;
        ops.push(if rng.random_range(0..2u8) == 0 {
            EditOp::insertion(new)
        } else {
            EditOp::replacement(origin, new)
        });
    }
    Ok(Perturbation {
        script: EditScript {
            ops,
            source_len: script.source_len,
        },
        fired,
    })
}

fn history_span<R: Rng + ?Sized>(
    history: &TokenSeq,
    rng: &mut R,
    max_len: usize,
) -> Result<TokenSeq, PerturbError> {
    if history.is_empty() {
        return Err(PerturbError::EmptyHistory);
    }
    sample_span(history, rng, max_len)
}
