//! Rewriting quality metrics and edit-level error analysis.
//!
//! Corpus scores: exact match, corpus-level BLEU (clipped n-gram precisions,
//! geometric mean, brevity penalty), micro-averaged ROUGE-n, per-sample
//! ROUGE-L, and the restoration F-score, which restricts n-gram overlap to
//! n-grams containing at least one restored word (a token absent from the
//! incomplete utterance). Stage-correlation fractions and an
//! insertion/replacement error breakdown support analysis of two-stage
//! runs.
//!
//! All counts are accumulated over the corpus before the final division
//! (micro-averaging), except ROUGE-L which averages per-sample scores.
//! Zero denominators never raise: optional fractions become absent and
//! corpus-level restoration denominators report 0 with a warning.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::editscript::{extract, lcs_align, EditOp};
use crate::text::TokenSeq;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("corpus size mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric requires a non-empty corpus")]
    EmptyCorpus,
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
}

/// Multiset of the n-grams of one sequence.
#[derive(Debug, Clone)]
pub struct NGramCounts {
    order: usize,
    counts: HashMap<Vec<String>, usize>,
}

impl NGramCounts {
    pub fn from_seq(seq: &TokenSeq, order: usize) -> Self {
        Self::from_seq_where(seq, order, |_| true)
    }

    /// Counts only the n-grams accepted by `keep`.
    pub fn from_seq_where(
        seq: &TokenSeq,
        order: usize,
        keep: impl Fn(&[String]) -> bool,
    ) -> Self {
        debug_assert!(order >= 1);
        let surfaces: Vec<String> = seq.surfaces().map(str::to_string).collect();
        let mut counts = HashMap::new();
        if surfaces.len() >= order {
            for gram in surfaces.windows(order) {
                if keep(gram) {
                    *counts.entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        NGramCounts { order, counts }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    /// Clipped overlap: each n-gram counts at most as often as it occurs
    /// in `other`.
    pub fn clipped_overlap(&self, other: &NGramCounts) -> usize {
        debug_assert_eq!(self.order, other.order);
        self.counts
            .iter()
            .map(|(gram, count)| (*count).min(other.counts.get(gram).copied().unwrap_or(0)))
            .sum()
    }
}

/// A precision/recall/F1 triple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Triple {
    fn new(precision: f64, recall: f64) -> Self {
        Triple {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }

    #[cfg(test)]
    const ZERO: Triple = Triple {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_corpus(left: usize, right: usize) -> Result<(), MetricsError> {
    if left != right {
        return Err(MetricsError::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(())
}

/// Fraction of samples whose prediction equals the reference, compared as
/// token sequences.
pub fn exact_match(predictions: &[TokenSeq], references: &[TokenSeq]) -> Result<f64, MetricsError> {
    check_corpus(predictions.len(), references.len())?;
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.same_surfaces(r))
        .count();
    Ok(ratio(hits, predictions.len()))
}

/// Corpus-level BLEU up to `max_order`: geometric mean of clipped n-gram
/// precisions times the brevity penalty `exp(min(0, 1 - ref_len/pred_len))`
/// over corpus-aggregated lengths. Any order with zero matches yields 0;
/// orders longer than every prediction have no precision at all (0/0) and
/// drop out of the mean, so identical corpora score 1 at every order.
pub fn bleu(
    predictions: &[TokenSeq],
    references: &[TokenSeq],
    max_order: usize,
) -> Result<f64, MetricsError> {
    check_corpus(predictions.len(), references.len())?;
    if max_order == 0 {
        return Err(MetricsError::InvalidOrder(0));
    }
    let pred_len: usize = predictions.iter().map(TokenSeq::len).sum();
    let ref_len: usize = references.iter().map(TokenSeq::len).sum();
    if pred_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders_with_grams = 0usize;
    for n in 1..=max_order {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (pred, rf) in predictions.iter().zip(references) {
            let p = NGramCounts::from_seq(pred, n);
            let r = NGramCounts::from_seq(rf, n);
            matched += p.clipped_overlap(&r);
            total += p.total();
        }
        if total == 0 {
            continue;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        orders_with_grams += 1;
        log_sum += (matched as f64 / total as f64).ln();
    }
    let brevity = (1.0 - ref_len as f64 / pred_len as f64).min(0.0).exp();
    Ok(brevity * (log_sum / orders_with_grams as f64).exp())
}

/// Micro-averaged n-gram overlap: clipped matches over the corpus divided
/// by total prediction n-grams (precision) and reference n-grams (recall).
pub fn rouge_n(
    predictions: &[TokenSeq],
    references: &[TokenSeq],
    n: usize,
) -> Result<Triple, MetricsError> {
    check_corpus(predictions.len(), references.len())?;
    if n == 0 {
        return Err(MetricsError::InvalidOrder(0));
    }
    let mut matched = 0usize;
    let mut pred_total = 0usize;
    let mut ref_total = 0usize;
    for (pred, rf) in predictions.iter().zip(references) {
        let p = NGramCounts::from_seq(pred, n);
        let r = NGramCounts::from_seq(rf, n);
        matched += p.clipped_overlap(&r);
        pred_total += p.total();
        ref_total += r.total();
    }
    Ok(Triple::new(
        ratio(matched, pred_total),
        ratio(matched, ref_total),
    ))
}

/// ROUGE-L: per-sample longest-common-subsequence precision, recall and F1,
/// averaged over the corpus. Empty sides score 0 for that sample.
pub fn rouge_l(predictions: &[TokenSeq], references: &[TokenSeq]) -> Result<Triple, MetricsError> {
    check_corpus(predictions.len(), references.len())?;
    let mut sum = (0.0, 0.0, 0.0);
    for (pred, rf) in predictions.iter().zip(references) {
        let lcs = lcs_align(pred, rf).len();
        let p = ratio(lcs, pred.len());
        let r = ratio(lcs, rf.len());
        sum.0 += p;
        sum.1 += r;
        sum.2 += f1(p, r);
    }
    let n = predictions.len() as f64;
    Ok(Triple {
        precision: sum.0 / n,
        recall: sum.1 / n,
        f1: sum.2 / n,
    })
}

/// Token types present in `utterance` but absent from `incomplete`
/// (multiplicity ignored).
pub fn restored_words(incomplete: &TokenSeq, utterance: &TokenSeq) -> BTreeSet<String> {
    let known: BTreeSet<&str> = incomplete.surfaces().collect();
    utterance
        .surfaces()
        .filter(|s| !known.contains(s))
        .map(str::to_string)
        .collect()
}

/// Restoration F-score outcome; `warnings` records corpus-level zero
/// denominators that were reported as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorationScore {
    pub score: Triple,
    pub warnings: Vec<String>,
}

/// N-gram precision/recall/F restricted to n-grams containing at least one
/// restored word, micro-averaged with clipped counts.
pub fn restoration_fscore(
    incompletes: &[TokenSeq],
    predictions: &[TokenSeq],
    references: &[TokenSeq],
    n: usize,
) -> Result<RestorationScore, MetricsError> {
    check_corpus(predictions.len(), references.len())?;
    check_corpus(incompletes.len(), predictions.len())?;
    if n == 0 {
        return Err(MetricsError::InvalidOrder(0));
    }
    let mut matched = 0usize;
    let mut pred_total = 0usize;
    let mut ref_total = 0usize;
    for ((inc, pred), rf) in incompletes.iter().zip(predictions).zip(references) {
        let pred_restored = restored_words(inc, pred);
        let ref_restored = restored_words(inc, rf);
        let p = NGramCounts::from_seq_where(pred, n, |gram| {
            gram.iter().any(|t| pred_restored.contains(t))
        });
        let r = NGramCounts::from_seq_where(rf, n, |gram| {
            gram.iter().any(|t| ref_restored.contains(t))
        });
        matched += p.clipped_overlap(&r);
        pred_total += p.total();
        ref_total += r.total();
    }
    let mut warnings = Vec::new();
    if pred_total == 0 {
        warnings.push(format!(
            "restoration f_{n}: no prediction {n}-gram contains a restored word; precision reported as 0"
        ));
    }
    if ref_total == 0 {
        warnings.push(format!(
            "restoration f_{n}: no reference {n}-gram contains a restored word; recall reported as 0"
        ));
    }
    Ok(RestorationScore {
        score: Triple::new(ratio(matched, pred_total), ratio(matched, ref_total)),
        warnings,
    })
}

/// Stage-correlation fractions over per-sample (stage-1 correct, stage-2
/// correct) pairs: the error-to-correct rate among stage-1 errors and the
/// correct-to-error rate among stage-1 successes. A zero denominator gives
/// an absent value.
pub fn e2c_c2e(
    stage_pairs: &[(bool, bool)],
) -> Result<(Option<f64>, Option<f64>), MetricsError> {
    if stage_pairs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let s1_wrong = stage_pairs.iter().filter(|(s1, _)| !s1).count();
    let s1_right = stage_pairs.len() - s1_wrong;
    let e2c_num = stage_pairs.iter().filter(|(s1, s2)| !s1 && *s2).count();
    let c2e_num = stage_pairs.iter().filter(|(s1, s2)| *s1 && !s2).count();
    let frac = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok((frac(e2c_num, s1_wrong), frac(c2e_num, s1_right)))
}

/// Edit-level attribution of wrong predictions, plus the no-edit subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    /// Wrong samples whose insertion-op multiset differs from gold.
    pub insertion_error_count: usize,
    /// Wrong samples whose replacement-op multiset differs from gold.
    pub replacement_error_count: usize,
    /// Samples whose reference equals the incomplete utterance.
    pub no_edit_samples: usize,
    /// Exact match restricted to the no-edit samples (0 when there are
    /// none).
    pub no_edit_em: f64,
}

/// Charges each wrong prediction with insertion and/or replacement errors
/// by extracting edit scripts for the prediction and the reference against
/// the same incomplete utterance and comparing the per-kind op multisets
/// (anchor, deleted span, inserted span).
pub fn error_breakdown(
    incompletes: &[TokenSeq],
    predictions: &[TokenSeq],
    references: &[TokenSeq],
) -> Result<ErrorBreakdown, MetricsError> {
    check_corpus(predictions.len(), references.len())?;
    check_corpus(incompletes.len(), predictions.len())?;
    let mut breakdown = ErrorBreakdown {
        insertion_error_count: 0,
        replacement_error_count: 0,
        no_edit_samples: 0,
        no_edit_em: 0.0,
    };
    let mut no_edit_hits = 0usize;
    for ((inc, pred), rf) in incompletes.iter().zip(predictions).zip(references) {
        if rf.same_surfaces(inc) {
            breakdown.no_edit_samples += 1;
            if pred.same_surfaces(rf) {
                no_edit_hits += 1;
            }
        }
        if pred.same_surfaces(rf) {
            continue;
        }
        let gold = extract(inc, rf);
        let predicted = extract(inc, pred);
        let (gold_ins, gold_rep) = op_multisets(&gold.ops);
        let (pred_ins, pred_rep) = op_multisets(&predicted.ops);
        if gold_ins != pred_ins {
            breakdown.insertion_error_count += 1;
        }
        if gold_rep != pred_rep {
            breakdown.replacement_error_count += 1;
        }
    }
    breakdown.no_edit_em = ratio(no_edit_hits, breakdown.no_edit_samples);
    Ok(breakdown)
}

type OpKey = (Option<usize>, Vec<String>, Vec<String>);

fn op_multisets(ops: &[EditOp]) -> (BTreeMap<OpKey, usize>, BTreeMap<OpKey, usize>) {
    let mut insertions = BTreeMap::new();
    let mut replacements = BTreeMap::new();
    for op in ops {
        let key: OpKey = (
            op.anchor(),
            op.deleted()
                .map(|d| d.surfaces().map(str::to_string).collect())
                .unwrap_or_default(),
            op.inserted().surfaces().map(str::to_string).collect(),
        );
        let bucket = if op.is_insertion() {
            &mut insertions
        } else {
            &mut replacements
        };
        *bucket.entry(key).or_insert(0) += 1;
    }
    (insertions, replacements)
}

/// Stage-1 correctness crossed with stage-2 correctness, counted over the
/// corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMatrix {
    pub s1_right_s2_right: usize,
    pub s1_right_s2_wrong: usize,
    pub s1_wrong_s2_right: usize,
    pub s1_wrong_s2_wrong: usize,
}

impl StageMatrix {
    pub fn from_pairs(pairs: &[(bool, bool)]) -> Self {
        let count = |s1: bool, s2: bool| {
            pairs
                .iter()
                .filter(|&&(a, b)| a == s1 && b == s2)
                .count()
        };
        StageMatrix {
            s1_right_s2_right: count(true, true),
            s1_right_s2_wrong: count(true, false),
            s1_wrong_s2_right: count(false, true),
            s1_wrong_s2_wrong: count(false, false),
        }
    }

    pub fn total(&self) -> usize {
        self.s1_right_s2_right
            + self.s1_right_s2_wrong
            + self.s1_wrong_s2_right
            + self.s1_wrong_s2_wrong
    }
}

/// The full evaluation report. Serializes with flat keys (`em`, `bleu_1`…,
/// `rouge_1`…, `rouge_l`, `f_1`…, `e2c`, `c2e`, `error_breakdown`,
/// `warnings`, plus the stage fields when present).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub em: f64,
    pub bleu: BTreeMap<usize, f64>,
    pub rouge: BTreeMap<usize, Triple>,
    pub rouge_l: Triple,
    pub restoration: BTreeMap<usize, Triple>,
    pub e2c: Option<f64>,
    pub c2e: Option<f64>,
    pub error_breakdown: ErrorBreakdown,
    pub stage1_em: Option<f64>,
    pub stage_matrix: Option<StageMatrix>,
    pub warnings: Vec<String>,
}

impl Serialize for EvalReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let extra = usize::from(self.stage1_em.is_some()) + usize::from(self.stage_matrix.is_some());
        let len = 6 + self.bleu.len() + self.rouge.len() + self.restoration.len() + extra;
        let mut map = serializer.serialize_map(Some(len))?;
        map.serialize_entry("em", &self.em)?;
        for (n, score) in &self.bleu {
            map.serialize_entry(&format!("bleu_{n}"), score)?;
        }
        for (n, score) in &self.rouge {
            map.serialize_entry(&format!("rouge_{n}"), score)?;
        }
        map.serialize_entry("rouge_l", &self.rouge_l)?;
        for (n, score) in &self.restoration {
            map.serialize_entry(&format!("f_{n}"), score)?;
        }
        map.serialize_entry("e2c", &self.e2c)?;
        map.serialize_entry("c2e", &self.c2e)?;
        map.serialize_entry("error_breakdown", &self.error_breakdown)?;
        if let Some(v) = self.stage1_em {
            map.serialize_entry("stage1_em", &v)?;
        }
        if let Some(m) = &self.stage_matrix {
            map.serialize_entry("stage_matrix", m)?;
        }
        map.serialize_entry("warnings", &self.warnings)?;
        map.end()
    }
}

/// Computes every corpus metric at the given n-gram orders. Stage fields
/// stay absent; two-stage analyses fill them in afterwards.
pub fn evaluate(
    incompletes: &[TokenSeq],
    predictions: &[TokenSeq],
    references: &[TokenSeq],
    orders: &[usize],
) -> Result<EvalReport, MetricsError> {
    let mut report = EvalReport {
        em: exact_match(predictions, references)?,
        bleu: BTreeMap::new(),
        rouge: BTreeMap::new(),
        rouge_l: rouge_l(predictions, references)?,
        restoration: BTreeMap::new(),
        e2c: None,
        c2e: None,
        error_breakdown: error_breakdown(incompletes, predictions, references)?,
        stage1_em: None,
        stage_matrix: None,
        warnings: Vec::new(),
    };
    for &n in orders {
        report.bleu.insert(n, bleu(predictions, references, n)?);
        report.rouge.insert(n, rouge_n(predictions, references, n)?);
        let restoration = restoration_fscore(incompletes, predictions, references, n)?;
        report.restoration.insert(n, restoration.score);
        report.warnings.extend(restoration.warnings);
    }
    Ok(report)
}
