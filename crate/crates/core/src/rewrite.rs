//! Lossless SPARQL tokenization and IRI-to-label rewriting.
//!
//! The tokenizer does not validate the query against a grammar. It only
//! needs to find every IRI occurrence so that the labeled reformulation can
//! be produced while every other byte of the query stays untouched.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Map from prefix name (without the colon) to namespace IRI.
pub type PrefixTable = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Iri,
    PrefixedName,
    Variable,
    Literal,
    Keyword,
    Punctuation,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryToken {
    pub kind: TokenKind,
    pub text: String,
    /// Byte offsets `(start, end)` into the source query.
    pub span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Subject,
    Predicate,
    Object,
    Unknown,
}

/// An IRI occurrence in a query, expanded to absolute form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IriRef {
    pub iri: String,
    pub surface: String,
    pub role: Role,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("empty query")]
    EmptyQuery,
    #[error("unterminated string literal starting at byte {0}")]
    UnterminatedLiteral(usize),
    #[error("unterminated IRI starting at byte {0}")]
    UnterminatedIri(usize),
    #[error("unknown prefix `{prefix}:` at byte {offset}")]
    UnknownPrefix { prefix: String, offset: usize },
    #[error("IRI `{iri}` at byte {offset} is not absolute")]
    RelativeIri { iri: String, offset: usize },
    #[error("no label for {} IRI(s): {}", .0.len(), MissingList(.0))]
    MissingLabels(Vec<String>),
}

struct MissingList<'a>(&'a [String]);

impl fmt::Display for MissingList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, iri) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "<{iri}>")?;
        }
        Ok(())
    }
}

/// Common Wikidata, RDF and DBpedia prefixes.
pub fn default_prefixes() -> PrefixTable {
    const DEFAULTS: &[(&str, &str)] = &[
        ("bd", "http://www.bigdata.com/rdf#"),
        ("dbo", "http://dbpedia.org/ontology/"),
        ("dbp", "http://dbpedia.org/property/"),
        ("dbr", "http://dbpedia.org/resource/"),
        ("dct", "http://purl.org/dc/terms/"),
        ("foaf", "http://xmlns.com/foaf/0.1/"),
        ("owl", "http://www.w3.org/2002/07/owl#"),
        ("p", "http://www.wikidata.org/prop/"),
        ("pq", "http://www.wikidata.org/prop/qualifier/"),
        ("pqv", "http://www.wikidata.org/prop/qualifier/value/"),
        ("prov", "http://www.w3.org/ns/prov#"),
        ("ps", "http://www.wikidata.org/prop/statement/"),
        ("psv", "http://www.wikidata.org/prop/statement/value/"),
        ("rdf", "http://www.w3.org/1999/02/22-rdf-syntax-ns#"),
        ("rdfs", "http://www.w3.org/2000/01/rdf-schema#"),
        ("schema", "http://schema.org/"),
        ("skos", "http://www.w3.org/2004/02/skos/core#"),
        ("wd", "http://www.wikidata.org/entity/"),
        ("wdt", "http://www.wikidata.org/prop/direct/"),
        ("wikibase", "http://wikiba.se/ontology#"),
        ("xsd", "http://www.w3.org/2001/XMLSchema#"),
    ];
    DEFAULTS.iter().map(|(p, ns)| (p.to_string(), ns.to_string())).collect()
}

fn is_iri_char(c: char) -> bool {
    !(c.is_whitespace() || matches!(c, '<' | '>' | '"' | '{' | '}' | '|' | '^' | '`' | '\\'))
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | ':' | '%')
}

fn is_var_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Characters that rule out reading `[ ... ]` as a rendered label.
fn breaks_label(c: char) -> bool {
    matches!(c, '[' | '{' | '}' | '<' | '>' | '"' | '?' | '$' | ';' | '\n' | '\r')
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    tokens: Vec<QueryToken>,
}

impl<'a> Lexer<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.src[self.pos..].chars().nth(offset)
    }

    fn push(&mut self, kind: TokenKind, end: usize) {
        self.tokens.push(QueryToken {
            kind,
            text: self.src[self.pos..end].to_string(),
            span: (self.pos, end),
        });
        self.pos = end;
    }

    fn scan_while(&self, from: usize, pred: impl Fn(char) -> bool) -> usize {
        let mut end = from;
        for c in self.src[from..].chars() {
            if !pred(c) {
                break;
            }
            end += c.len_utf8();
        }
        end
    }

    fn run(mut self) -> Result<Vec<QueryToken>, RewriteError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            if c.is_whitespace() {
                let end = self.scan_while(start, char::is_whitespace);
                self.push(TokenKind::Whitespace, end);
            } else if c == '#' {
                // comments are trivia
                let end = self.scan_while(start, |c| c != '\n');
                self.push(TokenKind::Whitespace, end);
            } else if c == '"' || c == '\'' {
                let end = self.scan_string(start, c)?;
                self.push(TokenKind::Literal, end);
            } else if c == '<' {
                match self.scan_iri(start)? {
                    Some(end) => self.push(TokenKind::Iri, end),
                    None => self.scan_operator(start),
                }
            } else if (c == '?' || c == '$') && self.peek_at(1).is_some_and(is_var_char) {
                let end = self.scan_while(start + 1, is_var_char);
                self.push(TokenKind::Variable, end);
            } else if c == '_' && self.peek_at(1) == Some(':') {
                // blank node labels behave like variables in patterns
                let end = self.scan_while(start + 2, is_var_char);
                self.push(TokenKind::Variable, end);
            } else if c.is_ascii_digit() {
                let end = self.scan_number(start);
                self.push(TokenKind::Literal, end);
            } else if c == '[' {
                self.push(TokenKind::Punctuation, start + 1);
                if let Some(close) = self.scan_label(start + 1) {
                    if close > start + 1 {
                        self.push(TokenKind::Keyword, close);
                    }
                    self.push(TokenKind::Punctuation, close + 1);
                }
            } else if c.is_alphabetic() || c == ':' || c == '_' {
                let mut end = self.scan_while(start, is_name_char);
                while end > start + 1 && self.src[..end].ends_with('.') {
                    end -= 1;
                }
                let text = &self.src[start..end];
                let kind = if text.contains(':') {
                    TokenKind::PrefixedName
                } else {
                    TokenKind::Keyword
                };
                self.push(kind, end);
            } else {
                self.scan_operator(start);
            }
        }
        Ok(self.tokens)
    }

    fn scan_operator(&mut self, start: usize) {
        let rest = &self.src[start..];
        let len = ["^^", "&&", "||", "!=", "<=", ">="]
            .iter()
            .find(|op| rest.starts_with(*op))
            .map_or_else(|| rest.chars().next().map_or(1, char::len_utf8), |op| op.len());
        self.push(TokenKind::Punctuation, start + len);
    }

    fn scan_string(&self, start: usize, quote: char) -> Result<usize, RewriteError> {
        let rest = &self.src[start..];
        let long: String = [quote; 3].iter().collect();
        let (body_start, closing, multiline) = if rest.starts_with(long.as_str()) {
            (start + 3, long.clone(), true)
        } else {
            (start + 1, quote.to_string(), false)
        };
        let mut chars = self.src[body_start..].char_indices();
        let mut end = None;
        while let Some((i, c)) = chars.next() {
            if c == '\\' {
                chars.next();
                continue;
            }
            if !multiline && (c == '\n' || c == '\r') {
                break;
            }
            if self.src[body_start + i..].starts_with(closing.as_str()) {
                end = Some(body_start + i + closing.len());
                break;
            }
        }
        let mut end = end.ok_or(RewriteError::UnterminatedLiteral(start))?;
        // language tag
        if self.src[end..].starts_with('@') {
            end = self.scan_while(end + 1, |c| c.is_ascii_alphanumeric() || c == '-');
        }
        Ok(end)
    }

    /// Returns the end offset of an `<...>` IRI, `None` when the `<` is an
    /// operator.
    fn scan_iri(&self, start: usize) -> Result<Option<usize>, RewriteError> {
        match self.src[start + 1..].chars().next() {
            None => return Ok(None),
            Some(c) if c == '=' || !is_iri_char(c) => return Ok(None),
            Some(_) => {}
        }
        for (i, c) in self.src[start + 1..].char_indices() {
            if c == '>' {
                return Ok(Some(start + 1 + i + 1));
            }
            if !is_iri_char(c) {
                return Ok(None);
            }
        }
        Err(RewriteError::UnterminatedIri(start))
    }

    fn scan_number(&self, start: usize) -> usize {
        let mut end = self.scan_while(start, |c| c.is_ascii_digit() || c == '.');
        if matches!(self.src[end..].chars().next(), Some('e' | 'E')) {
            let mut exp = end + 1;
            if matches!(self.src[exp..].chars().next(), Some('+' | '-')) {
                exp += 1;
            }
            let digits = self.scan_while(exp, |c| c.is_ascii_digit());
            if digits > exp {
                end = digits;
            }
        }
        while end > start + 1 && self.src[..end].ends_with('.') {
            end -= 1;
        }
        end
    }

    /// Finds the closing bracket of a rendered `[label]`, if the text after
    /// `open` reads as one.
    fn scan_label(&self, open: usize) -> Option<usize> {
        let first = self.src[open..].chars().next()?;
        if first.is_whitespace() || first == ']' {
            return None;
        }
        let mut escaped = false;
        for (i, c) in self.src[open..].char_indices() {
            if escaped {
                escaped = false;
                continue;
            }
            match c {
                '\\' => escaped = true,
                ']' => {
                    let body = &self.src[open..open + i];
                    return (!looks_like_pattern(body)).then_some(open + i);
                }
                c if breaks_label(c) => return None,
                _ => {}
            }
        }
        None
    }
}

/// A `[ ... ]` body containing a `prefix:local` shape is a blank-node
/// property list, not a label.
fn looks_like_pattern(body: &str) -> bool {
    let bytes = body.as_bytes();
    bytes
        .windows(3)
        .any(|w| (w[0] as char).is_alphanumeric() && w[1] == b':' && !(w[2] as char).is_whitespace())
        || body.starts_with(':')
}

/// Splits a query into a lossless token stream.
pub fn tokenize(query: &str) -> Result<Vec<QueryToken>, RewriteError> {
    if query.is_empty() {
        return Err(RewriteError::EmptyQuery);
    }
    Lexer {
        src: query,
        pos: 0,
        tokens: Vec::new(),
    }
    .run()
}

fn is_absolute(iri: &str) -> bool {
    let Some(colon) = iri.find(':') else {
        return false;
    };
    let scheme = &iri[..colon];
    let mut chars = scheme.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
}

#[derive(Clone, Copy, PartialEq)]
enum Block {
    Group,
    Data,
}

/// Tracks triple-pattern positions to guess the role of each term.
struct RoleTracker {
    blocks: Vec<Block>,
    parens: usize,
    position: usize,
    next_block_is_data: bool,
    path_continues: bool,
}

impl RoleTracker {
    fn new() -> Self {
        Self {
            blocks: Vec::new(),
            parens: 0,
            position: 0,
            next_block_is_data: false,
            path_continues: false,
        }
    }

    fn in_pattern(&self) -> bool {
        self.parens == 0 && self.blocks.last() == Some(&Block::Group)
    }

    fn punct(&mut self, p: &str) {
        let was_path = self.path_continues;
        self.path_continues = false;
        match p {
            "{" => {
                let kind = if core::mem::take(&mut self.next_block_is_data) {
                    Block::Data
                } else {
                    Block::Group
                };
                self.blocks.push(kind);
                self.position = 0;
            }
            "}" => {
                self.blocks.pop();
                self.position = 0;
            }
            "(" => self.parens += 1,
            ")" => self.parens = self.parens.saturating_sub(1),
            "." if self.parens == 0 => self.position = 0,
            ";" if self.parens == 0 => self.position = 1,
            "," if self.parens == 0 => self.position = 2,
            "/" | "|" | "^" if self.in_pattern() && self.position == 2 => {
                // property path: the next term is still part of the predicate
                self.position = 1;
                self.path_continues = true;
            }
            "*" | "+" | "?" => self.path_continues = was_path,
            _ => {}
        }
    }

    fn keyword(&mut self, word: &str) {
        if word.eq_ignore_ascii_case("VALUES") {
            self.next_block_is_data = true;
        }
        if !(word == "a" || word.eq_ignore_ascii_case("true") || word.eq_ignore_ascii_case("false")) && self.parens == 0
        {
            self.position = 0;
        }
    }

    /// Role of the term at the current position, advancing past it.
    fn term(&mut self) -> Role {
        if !self.in_pattern() {
            return Role::Unknown;
        }
        let role = match self.position {
            0 => Role::Subject,
            1 => Role::Predicate,
            _ => Role::Object,
        };
        self.position = (self.position + 1).min(2);
        role
    }
}

/// Collects every entity/predicate IRI in `tokens`, expanding prefixed names.
///
/// `PREFIX` declarations inside the query take precedence over `prefixes`.
/// Declaration IRIs and datatype IRIs (after `^^`) are not reported.
pub fn extract_iris(tokens: &[QueryToken], prefixes: &PrefixTable) -> Result<Vec<IriRef>, RewriteError> {
    let prologue = prologue_spans(tokens);
    let local = local_prefixes(tokens, &prologue);
    let mut tracker = RoleTracker::new();
    let mut out = Vec::new();
    let mut after_datatype = false;
    for (i, tok) in tokens.iter().enumerate() {
        if tok.kind == TokenKind::Whitespace {
            continue;
        }
        let skip_datatype = core::mem::take(&mut after_datatype);
        if prologue.iter().any(|&(s, e)| i >= s && i < e) {
            continue;
        }
        match tok.kind {
            TokenKind::Punctuation => {
                if tok.text == "^^" {
                    after_datatype = true;
                } else if tok.text == "[" && is_label_open(tokens, i) {
                    tracker.term();
                } else if tok.text != "]" || !is_label_close(tokens, i) {
                    tracker.punct(&tok.text);
                }
            }
            TokenKind::Keyword => {
                if !is_label_body(tokens, i) {
                    if tok.text == "a" {
                        tracker.term();
                    } else {
                        tracker.keyword(&tok.text);
                    }
                }
            }
            TokenKind::Variable | TokenKind::Literal => {
                tracker.term();
            }
            TokenKind::Iri | TokenKind::PrefixedName => {
                if skip_datatype {
                    continue;
                }
                let role = tracker.term();
                let iri = if tok.kind == TokenKind::Iri {
                    let inner = &tok.text[1..tok.text.len() - 1];
                    if !is_absolute(inner) {
                        return Err(RewriteError::RelativeIri {
                            iri: inner.to_string(),
                            offset: tok.span.0,
                        });
                    }
                    inner.to_string()
                } else {
                    expand(&tok.text, tok.span.0, &local, prefixes)?
                };
                out.push(IriRef {
                    iri,
                    surface: tok.text.clone(),
                    role,
                    span: tok.span,
                });
            }
            TokenKind::Whitespace => {}
        }
    }
    Ok(out)
}

fn expand(name: &str, offset: usize, local: &PrefixTable, table: &PrefixTable) -> Result<String, RewriteError> {
    let (prefix, local_part) = name.split_once(':').unwrap_or((name, ""));
    let ns = local
        .get(prefix)
        .or_else(|| table.get(prefix))
        .ok_or_else(|| RewriteError::UnknownPrefix {
            prefix: prefix.to_string(),
            offset,
        })?;
    let mut iri = String::with_capacity(ns.len() + local_part.len());
    iri.push_str(ns);
    iri.push_str(local_part);
    Ok(iri)
}

fn is_label_body(tokens: &[QueryToken], i: usize) -> bool {
    i > 0
        && tokens[i - 1].text == "["
        && tokens.get(i + 1).is_some_and(|t| t.text == "]")
        && tokens[i].span.0 == tokens[i - 1].span.1
}

fn is_label_open(tokens: &[QueryToken], i: usize) -> bool {
    tokens.get(i + 1).is_some_and(|t| t.kind == TokenKind::Keyword) && is_label_body(tokens, i + 1)
}

fn is_label_close(tokens: &[QueryToken], i: usize) -> bool {
    i > 0 && is_label_body(tokens, i - 1)
}

/// Token index ranges `[start, end)` covering `PREFIX p: <iri>` and
/// `BASE <iri>` declarations, including trailing whitespace.
fn prologue_spans(tokens: &[QueryToken]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let next_solid = |mut j: usize| {
        while j < tokens.len() && tokens[j].kind == TokenKind::Whitespace {
            j += 1;
        }
        j
    };
    let mut i = 0;
    while i < tokens.len() {
        let t = &tokens[i];
        if t.kind == TokenKind::Keyword && t.text.eq_ignore_ascii_case("BASE") {
            let j = next_solid(i + 1);
            if tokens.get(j).is_some_and(|t| t.kind == TokenKind::Iri) {
                let end = skip_ws(tokens, j + 1);
                spans.push((i, end));
                i = end;
                continue;
            }
        }
        if t.kind == TokenKind::Keyword && t.text.eq_ignore_ascii_case("PREFIX") {
            let j = next_solid(i + 1);
            let k = next_solid(j + 1);
            let name_ok = tokens
                .get(j)
                .is_some_and(|t| t.kind == TokenKind::PrefixedName && t.text.ends_with(':'));
            if name_ok && tokens.get(k).is_some_and(|t| t.kind == TokenKind::Iri) {
                let end = skip_ws(tokens, k + 1);
                spans.push((i, end));
                i = end;
                continue;
            }
        }
        i += 1;
    }
    spans
}

fn skip_ws(tokens: &[QueryToken], mut j: usize) -> usize {
    while j < tokens.len() && tokens[j].kind == TokenKind::Whitespace {
        j += 1;
    }
    j
}

fn local_prefixes(tokens: &[QueryToken], prologue: &[(usize, usize)]) -> PrefixTable {
    let mut map = PrefixTable::new();
    for &(s, e) in prologue {
        let solid: Vec<&QueryToken> = tokens[s..e]
            .iter()
            .filter(|t| t.kind != TokenKind::Whitespace)
            .collect();
        if solid.len() == 3 && solid[0].text.eq_ignore_ascii_case("PREFIX") {
            let name = solid[1].text.trim_end_matches(':').to_string();
            let iri = &solid[2].text;
            map.insert(name, iri[1..iri.len() - 1].to_string());
        }
    }
    map
}

/// Renders a label as `[label]`, escaping `]` as `\]`.
pub fn render_label(label: &str) -> String {
    let mut out = String::with_capacity(label.len() + 2);
    out.push('[');
    for c in label.chars() {
        if c == ']' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push(']');
    out
}

/// Produces the labeled reformulation of `query`.
///
/// Every IRI surface is replaced with `[label]`. Prologue declarations are
/// dropped since no IRI remains that could use them; every other token is
/// copied byte for byte.
pub fn replace_ids(
    query: &str,
    labels: &BTreeMap<String, String>,
    prefixes: &PrefixTable,
) -> Result<String, RewriteError> {
    let tokens = tokenize(query)?;
    let iris = extract_iris(&tokens, prefixes)?;

    let mut missing: Vec<String> = iris
        .iter()
        .filter(|r| !labels.contains_key(&r.iri))
        .map(|r| r.iri.clone())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(RewriteError::MissingLabels(missing));
    }

    let prologue = prologue_spans(&tokens);
    let mut by_start: BTreeMap<usize, &str> = BTreeMap::new();
    for r in &iris {
        by_start.insert(r.span.0, labels[&r.iri].as_str());
    }

    let mut out = String::with_capacity(query.len());
    for (i, tok) in tokens.iter().enumerate() {
        if prologue.iter().any(|&(s, e)| i >= s && i < e) {
            continue;
        }
        match by_start.get(&tok.span.0) {
            Some(label) if matches!(tok.kind, TokenKind::Iri | TokenKind::PrefixedName) => {
                out.push_str(&render_label(label));
            }
            _ => out.push_str(&tok.text),
        }
    }
    Ok(out)
}

/// True when `text` contains an angle-bracketed `http://` or `https://` IRI.
pub fn contains_absolute_iri(text: &str) -> bool {
    let mut rest = text;
    while let Some(i) = rest.find('<') {
        let after = &rest[i + 1..];
        if after.starts_with("http://") || after.starts_with("https://") {
            return true;
        }
        rest = after;
    }
    false
}

/// Text after the last `/` or `#` of an IRI.
pub fn local_name(iri: &str) -> &str {
    iri.rfind(['/', '#']).map_or(iri, |i| &iri[i + 1..])
}
