//! The edit-operation calculus.
//!
//! An edit script is an ordered list of insertions and replacements against
//! an incomplete utterance. Scripts are extracted from (incomplete,
//! rewritten) pairs by aligning the two on their longest common subsequence:
//! tokens of the incomplete utterance missing from the alignment become
//! deletion runs, tokens of the rewritten utterance missing from it become
//! insertion runs, and a deletion and insertion run sharing the same gap
//! between alignment anchors merge into a replacement.
//!
//! Scripts serialize to a flat marker string (`[I] span` for insertions,
//! `[D] old [R] new` for replacements) and parse back, leniently if needed,
//! since generation models emit noisy variants of the grammar.

mod apply;
mod lcs;
mod parse;

pub use apply::{apply, Applied, ApplyError, Strategy};
pub use lcs::lcs_align;
pub use parse::{parse, parse_with, Diagnostic, DiagnosticKind, ParseError, Parsed, Policy};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{detokenize, Markers, Token, TokenKind, TokenSeq};

/// A single edit against the incomplete utterance.
///
/// Anchors index into the incomplete utterance the script was extracted
/// from: gap position `0..=len` for insertions, start of the deleted span
/// for replacements. Parsed and perturbed scripts carry no anchors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Insertion {
        inserted: TokenSeq,
        anchor: Option<usize>,
    },
    Replacement {
        deleted: TokenSeq,
        inserted: TokenSeq,
        anchor: Option<usize>,
    },
}

impl EditOp {
    pub fn insertion(inserted: TokenSeq) -> Self {
        debug_assert!(!inserted.is_empty(), "insertion span must be non-empty");
        EditOp::Insertion {
            inserted,
            anchor: None,
        }
    }

    pub fn insertion_at(inserted: TokenSeq, anchor: usize) -> Self {
        debug_assert!(!inserted.is_empty(), "insertion span must be non-empty");
        EditOp::Insertion {
            inserted,
            anchor: Some(anchor),
        }
    }

    pub fn replacement(deleted: TokenSeq, inserted: TokenSeq) -> Self {
        debug_assert!(!deleted.is_empty() && !inserted.is_empty());
        EditOp::Replacement {
            deleted,
            inserted,
            anchor: None,
        }
    }

    pub fn replacement_at(deleted: TokenSeq, inserted: TokenSeq, anchor: usize) -> Self {
        debug_assert!(!deleted.is_empty() && !inserted.is_empty());
        EditOp::Replacement {
            deleted,
            inserted,
            anchor: Some(anchor),
        }
    }

    pub fn is_insertion(&self) -> bool {
        matches!(self, EditOp::Insertion { .. })
    }

    pub fn is_replacement(&self) -> bool {
        matches!(self, EditOp::Replacement { .. })
    }

    pub fn inserted(&self) -> &TokenSeq {
        match self {
            EditOp::Insertion { inserted, .. } | EditOp::Replacement { inserted, .. } => inserted,
        }
    }

    /// The deleted span of a replacement; `None` for insertions.
    pub fn deleted(&self) -> Option<&TokenSeq> {
        match self {
            EditOp::Insertion { .. } => None,
            EditOp::Replacement { deleted, .. } => Some(deleted),
        }
    }

    pub fn anchor(&self) -> Option<usize> {
        match self {
            EditOp::Insertion { anchor, .. } | EditOp::Replacement { anchor, .. } => *anchor,
        }
    }

    pub fn set_anchor(&mut self, anchor: Option<usize>) {
        match self {
            EditOp::Insertion { anchor: a, .. } | EditOp::Replacement { anchor: a, .. } => {
                *a = anchor;
            }
        }
    }

    pub fn without_anchor(&self) -> EditOp {
        let mut op = self.clone();
        op.set_anchor(None);
        op
    }

    /// Same kind and same span surfaces, anchors ignored.
    pub fn same_op(&self, other: &EditOp) -> bool {
        match (self, other) {
            (EditOp::Insertion { inserted: a, .. }, EditOp::Insertion { inserted: b, .. }) => {
                a.same_surfaces(b)
            }
            (
                EditOp::Replacement {
                    deleted: da,
                    inserted: ia,
                    ..
                },
                EditOp::Replacement {
                    deleted: db,
                    inserted: ib,
                    ..
                },
            ) => da.same_surfaces(db) && ia.same_surfaces(ib),
            _ => false,
        }
    }

    /// An inserted span consisting of a single marker token is the pure
    /// deletion sentinel: applying it removes the deleted span outright.
    pub fn is_pure_deletion(&self) -> bool {
        match self {
            EditOp::Replacement { inserted, .. } => {
                inserted.len() == 1 && inserted.tokens()[0].is_marker()
            }
            EditOp::Insertion { .. } => false,
        }
    }
}

/// An ordered edit script; the pivot representation between the two
/// generation stages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
    /// Token count of the incomplete utterance the anchors refer to.
    pub source_len: Option<usize>,
}

impl EditScript {
    pub fn new(ops: Vec<EditOp>) -> Self {
        EditScript {
            ops,
            source_len: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn insertion_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_insertion()).count()
    }

    pub fn replacement_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_replacement()).count()
    }

    /// Order-sensitive op equality ignoring anchors and `source_len`.
    pub fn same_ops(&self, other: &EditScript) -> bool {
        self.ops.len() == other.ops.len()
            && self
                .ops
                .iter()
                .zip(other.ops.iter())
                .all(|(a, b)| a.same_op(b))
    }

    /// Partitions into (replacements, insertions), preserving order and
    /// anchors within each part.
    pub fn split_by_kind(&self) -> (EditScript, EditScript) {
        let (replacements, insertions): (Vec<EditOp>, Vec<EditOp>) =
            self.ops.iter().cloned().partition(EditOp::is_replacement);
        (
            EditScript {
                ops: replacements,
                source_len: self.source_len,
            },
            EditScript {
                ops: insertions,
                source_len: self.source_len,
            },
        )
    }

    /// Ops in the order the given layout serializes them, with their
    /// original indices.
    fn ordered(&self, layout: Layout) -> Vec<(usize, &EditOp)> {
        match layout {
            Layout::Positional => self.ops.iter().enumerate().collect(),
            Layout::Grouped => {
                let mut ordered: Vec<(usize, &EditOp)> = self
                    .ops
                    .iter()
                    .enumerate()
                    .filter(|(_, op)| op.is_insertion())
                    .collect();
                ordered.extend(
                    self.ops
                        .iter()
                        .enumerate()
                        .filter(|(_, op)| op.is_replacement()),
                );
                ordered
            }
        }
    }

    /// The script reordered per `layout`, anchors preserved.
    pub fn in_layout(&self, layout: Layout) -> EditScript {
        EditScript {
            ops: self
                .ordered(layout)
                .into_iter()
                .map(|(_, op)| op.clone())
                .collect(),
            source_len: self.source_len,
        }
    }
}

/// Serialization order of the marker string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Ops in script order (position order in the original utterance).
    #[default]
    Positional,
    /// All insertions first, then all replacements.
    Grouped,
}

impl std::str::FromStr for Layout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "positional" => Ok(Layout::Positional),
            "grouped" => Ok(Layout::Grouped),
            other => Err(format!("unknown layout {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SerializeError {
    #[error("op {index}: span contains marker token {surface:?}")]
    MarkerInSpan { index: usize, surface: String },
}

/// Extracts the edit script transforming `incomplete` into `rewritten`,
/// using the default marker literals for the deletion sentinel.
///
/// Identical inputs yield the empty script. Anchors and `source_len` are
/// always populated, so [`apply`] with [`Strategy::Anchored`] reproduces
/// `rewritten` exactly.
pub fn extract(incomplete: &TokenSeq, rewritten: &TokenSeq) -> EditScript {
    extract_with_markers(incomplete, rewritten, &Markers::default())
}

pub fn extract_with_markers(
    incomplete: &TokenSeq,
    rewritten: &TokenSeq,
    markers: &Markers,
) -> EditScript {
    let pairs = lcs_align(incomplete, rewritten);
    let mut ops = Vec::new();
    let (mut gap_i, mut gap_j) = (0usize, 0usize);
    let end = (incomplete.len(), rewritten.len());
    for &(i, j) in pairs.iter().chain(std::iter::once(&end)) {
        let deleted = incomplete.slice(gap_i, i);
        let inserted = rewritten.slice(gap_j, j);
        match (deleted.is_empty(), inserted.is_empty()) {
            (true, true) => {}
            (true, false) => ops.push(EditOp::insertion_at(inserted, gap_i)),
            (false, false) => ops.push(EditOp::replacement_at(deleted, inserted, gap_i)),
            (false, true) => {
                // Pure deletion: keep the extractor total via the sentinel.
                let sentinel =
                    TokenSeq::new(vec![Token::new(markers.none.as_str(), TokenKind::Marker)]);
                ops.push(EditOp::replacement_at(deleted, sentinel, gap_i));
            }
        }
        gap_i = i + 1;
        gap_j = j + 1;
    }
    EditScript {
        ops,
        source_len: Some(incomplete.len()),
    }
}

/// Renders a script in the marker grammar. Anchors are not serialized; the
/// empty script renders as the empty string.
pub fn serialize(script: &EditScript, layout: Layout) -> Result<String, SerializeError> {
    serialize_with_markers(script, layout, &Markers::default())
}

pub fn serialize_with_markers(
    script: &EditScript,
    layout: Layout,
    markers: &Markers,
) -> Result<String, SerializeError> {
    let mut parts: Vec<String> = Vec::new();
    for (index, op) in script.ordered(layout) {
        match op {
            EditOp::Insertion { inserted, .. } => {
                check_span(inserted, index, false, markers)?;
                parts.push(format!("{} {}", markers.insert, detokenize(inserted)));
            }
            EditOp::Replacement {
                deleted, inserted, ..
            } => {
                check_span(deleted, index, false, markers)?;
                check_span(inserted, index, true, markers)?;
                parts.push(format!(
                    "{} {} {} {}",
                    markers.delete,
                    detokenize(deleted),
                    markers.replace,
                    detokenize(inserted)
                ));
            }
        }
    }
    Ok(parts.join(" "))
}

fn check_span(
    span: &TokenSeq,
    index: usize,
    sentinel_allowed: bool,
    markers: &Markers,
) -> Result<(), SerializeError> {
    if sentinel_allowed && span.len() == 1 && span.tokens()[0].surface() == markers.none {
        return Ok(());
    }
    if let Some(tok) = span.iter().find(|t| t.is_marker()) {
        return Err(SerializeError::MarkerInSpan {
            index,
            surface: tok.surface().to_string(),
        });
    }
    Ok(())
}
