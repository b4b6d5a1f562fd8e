//! Tokenization and detokenization for mixed CJK/Latin dialogue text.
//!
//! Dialogue corpora in this domain mix Chinese (conventionally evaluated at
//! character level) and English (word level). [`TokenizeMode::Auto`] handles
//! both in one pass: CJK code points become one-character tokens, Latin runs
//! split on whitespace and punctuation. Marker literals such as `[I]` or
//! `[SEP]` are always emitted as single atomic tokens so serialized edit
//! scripts survive a round trip through tokenization.

use serde::{Deserialize, Serialize};

/// Classification of a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    /// A single CJK character.
    CjkChar,
    /// A word or alphanumeric run.
    Word,
    /// A punctuation character or symbol.
    Punct,
    /// An atomic marker literal such as `[I]` or `[SEP]`.
    Marker,
}

/// One token: a non-empty surface string with no internal whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    surface: String,
    kind: TokenKind,
}

impl Token {
    pub fn new(surface: impl Into<String>, kind: TokenKind) -> Self {
        let surface = surface.into();
        debug_assert!(!surface.is_empty(), "token surface must be non-empty");
        debug_assert!(
            !surface.chars().any(char::is_whitespace),
            "token surface must not contain whitespace: {surface:?}"
        );
        debug_assert!(
            kind != TokenKind::CjkChar || surface.chars().count() == 1,
            "CJK tokens are single characters: {surface:?}"
        );
        Token { surface, kind }
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn is_marker(&self) -> bool {
        self.kind == TokenKind::Marker
    }
}

/// An ordered token sequence; the unit all diffing, application, and n-gram
/// metrics operate on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        TokenSeq { tokens }
    }

    pub fn empty() -> Self {
        TokenSeq { tokens: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Token> {
        self.tokens.iter()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(Token::surface)
    }

    pub fn push(&mut self, token: Token) {
        self.tokens.push(token);
    }

    pub fn extend_from(&mut self, other: &TokenSeq) {
        self.tokens.extend(other.tokens.iter().cloned());
    }

    /// Clones the subrange `[start, end)` into a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> TokenSeq {
        TokenSeq::new(self.tokens[start..end].to_vec())
    }

    /// Replaces the token range `[start, start + removed)` with `replacement`.
    pub fn splice(&mut self, start: usize, removed: usize, replacement: &TokenSeq) {
        self.tokens
            .splice(start..start + removed, replacement.tokens.iter().cloned());
    }

    pub fn contains_marker(&self) -> bool {
        self.tokens.iter().any(Token::is_marker)
    }

    /// True when both sequences carry the same surfaces in the same order,
    /// ignoring token kinds.
    pub fn same_surfaces(&self, other: &TokenSeq) -> bool {
        self.len() == other.len()
            && self
                .surfaces()
                .zip(other.surfaces())
                .all(|(a, b)| a == b)
    }

    pub fn detokenize(&self) -> String {
        detokenize(self)
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(tokens: Vec<Token>) -> Self {
        TokenSeq::new(tokens)
    }
}

impl FromIterator<Token> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = Token>>(iter: I) -> Self {
        TokenSeq::new(iter.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a TokenSeq {
    type Item = &'a Token;
    type IntoIter = std::slice::Iter<'a, Token>;

    fn into_iter(self) -> Self::IntoIter {
        self.tokens.iter()
    }
}

/// How raw text is segmented into tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    /// Every non-whitespace character is its own token.
    Char,
    /// Split on whitespace, then separate leading/trailing punctuation.
    Whitespace,
    /// CJK code points become one-character tokens; other runs split on
    /// whitespace and punctuation. The default everywhere.
    #[default]
    Auto,
}

impl std::str::FromStr for TokenizeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "char" => Ok(TokenizeMode::Char),
            "whitespace" => Ok(TokenizeMode::Whitespace),
            "auto" => Ok(TokenizeMode::Auto),
            other => Err(format!("unknown tokenization mode {other:?}")),
        }
    }
}

/// The marker literals recognized by the tokenizer and the script grammar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Markers {
    /// Introduces an insertion span.
    pub insert: String,
    /// Introduces the deleted span of a replacement.
    pub delete: String,
    /// Introduces the inserted span of a replacement.
    pub replace: String,
    /// Sentinel standing in for an empty inserted span (pure deletion).
    pub none: String,
    /// Prefix token of prepared model inputs.
    pub cls: String,
    /// Separator token of prepared model inputs.
    pub sep: String,
}

impl Default for Markers {
    fn default() -> Self {
        Markers {
            insert: "[I]".to_string(),
            delete: "[D]".to_string(),
            replace: "[R]".to_string(),
            none: "[NONE]".to_string(),
            cls: "[CLS]".to_string(),
            sep: "[SEP]".to_string(),
        }
    }
}

impl Markers {
    pub fn all(&self) -> [&str; 6] {
        [
            &self.insert,
            &self.delete,
            &self.replace,
            &self.none,
            &self.cls,
            &self.sep,
        ]
    }

    /// Longest marker literal starting at the beginning of `rest`, if any.
    fn match_prefix<'a>(&'a self, rest: &str) -> Option<&'a str> {
        self.all()
            .into_iter()
            .filter(|lit| !lit.is_empty() && rest.starts_with(*lit))
            .max_by_key(|lit| lit.len())
    }

    pub fn is_marker(&self, surface: &str) -> bool {
        self.all().contains(&surface)
    }
}

/// CJK code points that tokenize per character: unified ideographs (with
/// extensions and compatibility blocks) plus hiragana and katakana. Hangul is
/// left to whitespace segmentation.
pub fn is_cjk(ch: char) -> bool {
    matches!(
        ch as u32,
        0x4E00..=0x9FFF       // CJK Unified Ideographs
            | 0x3400..=0x4DBF // Extension A
            | 0x20000..=0x2A6DF // Extension B
            | 0x2A700..=0x2B73F // Extension C
            | 0x2B740..=0x2B81F // Extension D
            | 0x2B820..=0x2CEAF // Extension E
            | 0xF900..=0xFAFF   // Compatibility Ideographs
            | 0x2F800..=0x2FA1F // Compatibility Supplement
            | 0x3040..=0x309F   // Hiragana
            | 0x30A0..=0x30FF   // Katakana
    )
}

fn is_punct(ch: char) -> bool {
    !ch.is_alphanumeric() && !ch.is_whitespace()
}

fn classify_char(ch: char) -> TokenKind {
    if is_cjk(ch) {
        TokenKind::CjkChar
    } else if is_punct(ch) {
        TokenKind::Punct
    } else {
        TokenKind::Word
    }
}

/// Tokenizes with the default marker literals.
pub fn tokenize(text: &str, mode: TokenizeMode) -> TokenSeq {
    tokenize_with_markers(text, mode, &Markers::default())
}

/// Tokenizes `text`, emitting any of `markers` found verbatim as single
/// atomic tokens regardless of mode. Empty input yields an empty sequence.
pub fn tokenize_with_markers(text: &str, mode: TokenizeMode, markers: &Markers) -> TokenSeq {
    let mut tokens = Vec::new();
    match mode {
        TokenizeMode::Char => tokenize_char(text, markers, &mut tokens),
        TokenizeMode::Whitespace => {
            for chunk in text.split_whitespace() {
                tokenize_chunk_whitespace(chunk, markers, &mut tokens);
            }
        }
        TokenizeMode::Auto => tokenize_auto(text, markers, &mut tokens),
    }
    TokenSeq::new(tokens)
}

fn tokenize_char(text: &str, markers: &Markers, out: &mut Vec<Token>) {
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        if let Some(lit) = markers.match_prefix(rest) {
            out.push(Token::new(lit, TokenKind::Marker));
            rest = &rest[lit.len()..];
            continue;
        }
        if !ch.is_whitespace() {
            out.push(Token::new(ch.to_string(), classify_char(ch)));
        }
        rest = &rest[ch.len_utf8()..];
    }
}

fn tokenize_auto(text: &str, markers: &Markers, out: &mut Vec<Token>) {
    let mut rest = text;
    let mut word = String::new();
    macro_rules! flush_word {
        () => {
            if !word.is_empty() {
                out.push(Token::new(std::mem::take(&mut word), TokenKind::Word));
            }
        };
    }
    while let Some(ch) = rest.chars().next() {
        if let Some(lit) = markers.match_prefix(rest) {
            flush_word!();
            out.push(Token::new(lit, TokenKind::Marker));
            rest = &rest[lit.len()..];
            continue;
        }
        if ch.is_whitespace() {
            flush_word!();
        } else if is_cjk(ch) {
            flush_word!();
            out.push(Token::new(ch.to_string(), TokenKind::CjkChar));
        } else if is_punct(ch) {
            flush_word!();
            out.push(Token::new(ch.to_string(), TokenKind::Punct));
        } else {
            word.push(ch);
        }
        rest = &rest[ch.len_utf8()..];
    }
    flush_word!();
}

fn tokenize_chunk_whitespace(chunk: &str, markers: &Markers, out: &mut Vec<Token>) {
    // Markers split the chunk wherever they occur; the pieces in between get
    // leading/trailing punctuation separated.
    let mut rest = chunk;
    let mut piece = String::new();
    while let Some(ch) = rest.chars().next() {
        if let Some(lit) = markers.match_prefix(rest) {
            if !piece.is_empty() {
                push_piece(&std::mem::take(&mut piece), out);
            }
            out.push(Token::new(lit, TokenKind::Marker));
            rest = &rest[lit.len()..];
            continue;
        }
        piece.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    if !piece.is_empty() {
        push_piece(&piece, out);
    }
}

fn push_piece(piece: &str, out: &mut Vec<Token>) {
    let chars: Vec<char> = piece.chars().collect();
    let mut start = 0;
    let mut end = chars.len();
    while start < end && is_punct(chars[start]) {
        start += 1;
    }
    while end > start && is_punct(chars[end - 1]) {
        end -= 1;
    }
    for &ch in &chars[..start] {
        out.push(Token::new(ch.to_string(), TokenKind::Punct));
    }
    if start < end {
        let core: String = chars[start..end].iter().collect();
        let kind = if end - start == 1 {
            classify_char(chars[start])
        } else {
            TokenKind::Word
        };
        out.push(Token::new(core, kind));
    }
    for &ch in &chars[end..] {
        out.push(Token::new(ch.to_string(), TokenKind::Punct));
    }
}

/// Joins tokens back into a string: single spaces between word-like tokens,
/// no space before punctuation, no space on either side of a CJK character.
pub fn detokenize(seq: &TokenSeq) -> String {
    let mut out = String::new();
    let mut prev: Option<&Token> = None;
    for token in seq.iter() {
        if let Some(p) = prev {
            let glue = token.kind() == TokenKind::Punct
                || p.kind() == TokenKind::CjkChar
                || token.kind() == TokenKind::CjkChar;
            if !glue {
                out.push(' ');
            }
        }
        out.push_str(token.surface());
        prev = Some(token);
    }
    out
}
