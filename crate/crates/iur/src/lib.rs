//! Edit-script tooling for incomplete utterance rewriting.
//!
//! Multi-turn dialogue systems shorten utterances by dropping or
//! pronominalizing content that earlier turns already established. This
//! crate treats restoring such utterances as an editing problem: instead of
//! regenerating the whole sentence, it extracts the minimal insertions and
//! replacements that turn the incomplete utterance into its self-contained
//! form, serializes them in a compact marker grammar, and applies them back.
//!
//! The modules cover the full loop around a pair of text generation models:
//!
//! * [`text`]: tokenization for mixed CJK/Latin dialogue, marker-aware.
//! * [`editscript`]: extract, serialize, parse, and apply edit scripts.
//! * [`perturb`]: seeded noise over gold scripts for robustness training
//!   data.
//! * [`metrics`]: rewriting quality scores (exact match, BLEU, ROUGE,
//!   restoration F-score) and edit-level error analysis.
//! * [`corpus`]: dialogue corpora on disk and model input preparation.
//! * [`engine`]: batch inference against pluggable generation backends and
//!   the two-stage pipeline variants.
//! * [`cli`], [`config`]: the `iur` command-line tool.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod editscript;
pub mod engine;
pub mod metrics;
pub mod perturb;
pub mod rng;
pub mod text;

pub use editscript::{EditOp, EditScript};
pub use text::{Token, TokenKind, TokenSeq, TokenizeMode};
