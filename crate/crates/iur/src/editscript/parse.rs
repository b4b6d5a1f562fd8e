//! Parsing the marker grammar back into scripts.
//!
//! Grammar: `script := op*; op := "[I]" span | "[D]" span "[R]" span;
//! span := one or more non-marker tokens`, with one extension: the inserted
//! span of a replacement may be the single `[NONE]` sentinel, so serialized
//! pure deletions round-trip.
//!
//! Strict parsing fails on the first deviation. Lenient parsing recovers
//! from the kinds of noise generation models actually produce (leading
//! text, dangling `[D]`, orphan `[R]`, empty spans, stray markers) and
//! records one diagnostic per repair, so downstream reports can count
//! malformed fragments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EditOp, EditScript};
use crate::text::{tokenize_with_markers, Markers, Token, TokenKind, TokenSeq, TokenizeMode};

/// How to react to grammar deviations, both when parsing marker strings and
/// when applying scripts whose spans cannot be located.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[default]
    Strict,
    Lenient,
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(Policy::Strict),
            "lenient" => Ok(Policy::Lenient),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    /// A run of non-marker tokens outside any span (text before the first
    /// marker, or trailing text after a sentinel span).
    StrayText,
    /// A marker token that is neither `[I]`, `[D]` nor `[R]` where an op
    /// was expected.
    StrayMarker,
    /// `[R]` with no open `[D]`; the marker and its span are dropped.
    OrphanReplace,
    /// `[D] span` with no following `[R]`; the fragment is dropped.
    DanglingDelete,
    /// An op dropped because a required span was empty.
    EmptySpan,
}

impl std::fmt::Display for DiagnosticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DiagnosticKind::StrayText => "stray_text",
            DiagnosticKind::StrayMarker => "stray_marker",
            DiagnosticKind::OrphanReplace => "orphan_replace",
            DiagnosticKind::DanglingDelete => "dangling_delete",
            DiagnosticKind::EmptySpan => "empty_span",
        };
        f.write_str(name)
    }
}

/// One lenient-mode repair, pointing at the token where it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub token_index: usize,
    pub detail: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} at token {}: {}", self.kind, self.token_index, self.detail)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("token {index}: text outside any span: {snippet:?}")]
    StrayText { index: usize, snippet: String },
    #[error("token {index}: unexpected marker {surface:?}")]
    StrayMarker { index: usize, surface: String },
    #[error("token {index}: replacement marker without an open deletion")]
    OrphanReplace { index: usize },
    #[error("token {index}: deletion not followed by a replacement span")]
    DanglingDelete { index: usize },
    #[error("token {index}: op has an empty span")]
    EmptySpan { index: usize },
}

/// Parse result: the recovered script (ops carry no anchors) plus one
/// diagnostic per lenient repair. Strict successes have no diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub script: EditScript,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn parse(text: &str, mode: TokenizeMode, policy: Policy) -> Result<Parsed, ParseError> {
    parse_with(text, mode, policy, &Markers::default())
}

pub fn parse_with(
    text: &str,
    mode: TokenizeMode,
    policy: Policy,
    markers: &Markers,
) -> Result<Parsed, ParseError> {
    Parser {
        toks: tokenize_with_markers(text, mode, markers).tokens().to_vec(),
        markers,
        policy,
        pos: 0,
        ops: Vec::new(),
        diagnostics: Vec::new(),
    }
    .run()
}

struct Parser<'a> {
    toks: Vec<Token>,
    markers: &'a Markers,
    policy: Policy,
    pos: usize,
    ops: Vec<EditOp>,
    diagnostics: Vec<Diagnostic>,
}

impl Parser<'_> {
    fn run(mut self) -> Result<Parsed, ParseError> {
        while self.pos < self.toks.len() {
            self.step()?;
        }
        Ok(Parsed {
            script: EditScript::new(self.ops),
            diagnostics: self.diagnostics,
        })
    }

    fn step(&mut self) -> Result<(), ParseError> {
        let tok = &self.toks[self.pos];
        if tok.kind() != TokenKind::Marker {
            return self.stray_text();
        }
        let surface = tok.surface().to_string();
        if surface == self.markers.insert {
            self.pos += 1;
            self.insertion()
        } else if surface == self.markers.delete {
            self.pos += 1;
            self.replacement()
        } else if surface == self.markers.replace {
            self.recover(
                DiagnosticKind::OrphanReplace,
                ParseError::OrphanReplace { index: self.pos },
                "dropped replacement marker and its span",
            )?;
            self.pos += 1;
            self.inserted_span();
            Ok(())
        } else {
            self.recover(
                DiagnosticKind::StrayMarker,
                ParseError::StrayMarker {
                    index: self.pos,
                    surface: surface.clone(),
                },
                &format!("skipped marker {surface:?}"),
            )?;
            self.pos += 1;
            Ok(())
        }
    }

    fn insertion(&mut self) -> Result<(), ParseError> {
        let at = self.pos;
        let span = self.plain_span();
        if span.is_empty() {
            return self.recover(
                DiagnosticKind::EmptySpan,
                ParseError::EmptySpan { index: at },
                "dropped insertion with empty span",
            );
        }
        self.ops.push(EditOp::insertion(span));
        Ok(())
    }

    fn replacement(&mut self) -> Result<(), ParseError> {
        let at = self.pos;
        let deleted = self.plain_span();
        let next_is_replace = self
            .toks
            .get(self.pos)
            .is_some_and(|t| t.is_marker() && t.surface() == self.markers.replace);
        if !next_is_replace {
            return self.recover(
                DiagnosticKind::DanglingDelete,
                ParseError::DanglingDelete { index: self.pos },
                "dropped deletion with no replacement span",
            );
        }
        self.pos += 1;
        let inserted = self.inserted_span();
        if deleted.is_empty() || inserted.is_empty() {
            return self.recover(
                DiagnosticKind::EmptySpan,
                ParseError::EmptySpan { index: at },
                "dropped replacement with an empty span",
            );
        }
        self.ops.push(EditOp::replacement(deleted, inserted));
        Ok(())
    }

    /// A maximal run of non-marker tokens.
    fn plain_span(&mut self) -> TokenSeq {
        let start = self.pos;
        while self.pos < self.toks.len() && !self.toks[self.pos].is_marker() {
            self.pos += 1;
        }
        self.toks[start..self.pos].iter().cloned().collect()
    }

    /// Like [`Self::plain_span`], but a lone leading `[NONE]` is accepted
    /// as the complete pure-deletion sentinel.
    fn inserted_span(&mut self) -> TokenSeq {
        if let Some(tok) = self.toks.get(self.pos) {
            if tok.is_marker() && tok.surface() == self.markers.none {
                self.pos += 1;
                return TokenSeq::new(vec![tok.clone()]);
            }
        }
        self.plain_span()
    }

    fn stray_text(&mut self) -> Result<(), ParseError> {
        let at = self.pos;
        let run = self.plain_span();
        let snippet = run
            .iter()
            .map(|t| t.surface())
            .collect::<Vec<_>>()
            .join(" ");
        match self.policy {
            Policy::Strict => Err(ParseError::StrayText {
                index: at,
                snippet,
            }),
            Policy::Lenient => {
                self.diagnostics.push(Diagnostic {
                    kind: DiagnosticKind::StrayText,
                    token_index: at,
                    detail: format!("skipped text {snippet:?}"),
                });
                Ok(())
            }
        }
    }

    /// Strict mode propagates `err`; lenient mode records a diagnostic at
    /// the current position and lets the caller resume.
    fn recover(
        &mut self,
        kind: DiagnosticKind,
        err: ParseError,
        detail: &str,
    ) -> Result<(), ParseError> {
        match self.policy {
            Policy::Strict => Err(err),
            Policy::Lenient => {
                self.diagnostics.push(Diagnostic {
                    kind,
                    token_index: self.pos,
                    detail: detail.to_string(),
                });
                Ok(())
            }
        }
    }
}
