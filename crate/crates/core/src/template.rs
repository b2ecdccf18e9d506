//! Offline structure templates.
//!
//! A `.wgram` file is a list of rules:
//!
//! ```text
//! # comment
//! SECTION(title) ::= "<h1>" {title} "</h1>" SUMMARY ;
//! SUMMARY ::= "<p>" re"[^<]*" "</p>" ;
//! ```
//!
//! Bodies use quoted terminals, `{param}` slots, `re"..."` regex snippets,
//! references to other rules, grouping, `|`, and postfix `* + ?`. The file
//! is parsed with the Earley parser and compiled once into a
//! [`StructureFactory`]: references are inlined, terminals resolved to token
//! ids, and regex snippets lowered. Recursive rules are rejected.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::earley::{self, EarleyError, Grammar, Production, Sym, Tree};
use crate::pattern::{CompileError, Pattern};
use crate::regex::{self, RegexError};
use crate::vocab::{escape, TokenId, Vocabulary};

pub const FACTORY_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("{line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("template file defines no rules")]
    Empty,
    #[error("{line}:{col}: rule `{name}` is defined twice")]
    DuplicateRule { name: String, line: usize, col: usize },
    #[error("{line}:{col}: reference to undefined rule `{name}`")]
    Undefined { name: String, line: usize, col: usize },
    #[error("recursive rules: {}", cycle.join(" -> "))]
    Recursive { cycle: Vec<String> },
    #[error("{line}:{col}: placeholder `{{{name}}}` appears more than once in rule `{rule}`")]
    DuplicatePlaceholder {
        rule: String,
        name: String,
        line: usize,
        col: usize,
    },
    #[error("rule `{rule}` declares parameters {declared:?} but uses {used:?}")]
    ParamMismatch {
        rule: String,
        declared: Vec<String>,
        used: Vec<String>,
    },
    #[error("{line}:{col}: terminal {text:?} cannot be tokenized with this vocabulary")]
    Unresolvable { text: String, line: usize, col: usize },
    #[error("{line}:{col}: regex: {source}")]
    Regex {
        line: usize,
        col: usize,
        source: RegexError,
    },
    #[error("{line}:{col}: regex: {source}")]
    RegexLowering {
        line: usize,
        col: usize,
        source: CompileError,
    },
    #[error("ambiguous template syntax between {line}:{col} and {end_line}:{end_col}: {first} vs {second}")]
    Ambiguous {
        line: usize,
        col: usize,
        end_line: usize,
        end_col: usize,
        first: String,
        second: String,
    },
    #[error("factory dump: {0}")]
    Dump(String),
}

// terminal kinds
const IDENT: u32 = 0;
const STRING: u32 = 1;
const REGEX: u32 = 2;
const LPAREN: u32 = 3;
const RPAREN: u32 = 4;
const LBRACE: u32 = 5;
const RBRACE: u32 = 6;
const COMMA: u32 = 7;
const DEFINE: u32 = 8;
const SEMI: u32 = 9;
const BAR: u32 = 10;
const STAR: u32 = 11;
const PLUS: u32 = 12;
const QUEST: u32 = 13;

const KIND_NAMES: [&str; 14] = [
    "identifier", "string", "regex", "'('", "')'", "'{'", "'}'", "','", "'::='", "';'", "'|'", "'*'", "'+'", "'?'",
];

#[derive(Debug, Clone)]
struct Lexeme {
    kind: u32,
    text: String,
    bytes: Vec<u8>,
    line: usize,
    col: usize,
}

fn lex(src: &str) -> Result<Vec<Lexeme>, TemplateError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut line_start) = (0usize, 1usize, 0usize);
    while i < b.len() {
        let col = i - line_start + 1;
        let err = |msg: &str| TemplateError::Parse {
            line,
            col,
            msg: msg.to_string(),
        };
        let c = b[i];
        let simple = |kind: u32, len: usize| Lexeme {
            kind,
            text: src[i..i + len].to_string(),
            bytes: Vec::new(),
            line,
            col,
        };
        match c {
            b'\n' => {
                i += 1;
                line += 1;
                line_start = i;
            }
            b' ' | b'\t' | b'\r' => i += 1,
            b'#' => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'(' | b')' | b'{' | b'}' | b',' | b';' | b'|' | b'*' | b'+' | b'?' => {
                let kind = match c {
                    b'(' => LPAREN,
                    b')' => RPAREN,
                    b'{' => LBRACE,
                    b'}' => RBRACE,
                    b',' => COMMA,
                    b';' => SEMI,
                    b'|' => BAR,
                    b'*' => STAR,
                    b'+' => PLUS,
                    _ => QUEST,
                };
                out.push(simple(kind, 1));
                i += 1;
            }
            b':' => {
                if src[i..].starts_with("::=") {
                    out.push(simple(DEFINE, 3));
                    i += 3;
                } else {
                    return Err(err("expected '::='"));
                }
            }
            b'"' => {
                let (bytes, end) = scan_quoted(b, i + 1, true).map_err(|m| err(&m))?;
                out.push(Lexeme {
                    kind: STRING,
                    text: src[i..end].to_string(),
                    bytes,
                    line,
                    col,
                });
                i = end;
            }
            b'r' if b.get(i + 1) == Some(&b'e') && b.get(i + 2) == Some(&b'"') => {
                let (bytes, end) = scan_quoted(b, i + 3, false).map_err(|m| err(&m))?;
                let text = String::from_utf8(bytes.clone()).map_err(|_| err("regex is not UTF-8"))?;
                out.push(Lexeme {
                    kind: REGEX,
                    text,
                    bytes,
                    line,
                    col,
                });
                i = end;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                let start = i;
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                out.push(Lexeme {
                    kind: IDENT,
                    text: src[start..i].to_string(),
                    bytes: Vec::new(),
                    line,
                    col,
                });
            }
            _ => return Err(err(&format!("unexpected character {:?}", c as char))),
        }
    }
    Ok(out)
}

/// Scans a quoted body starting after the opening quote. With `cook`, C-style
/// escapes are decoded; otherwise only `\"` is unescaped and other
/// backslashes are kept for the regex parser. Returns bytes and the index
/// after the closing quote.
pub(crate) fn scan_quoted(b: &[u8], mut i: usize, cook: bool) -> Result<(Vec<u8>, usize), String> {
    let mut out = Vec::new();
    while i < b.len() {
        match b[i] {
            b'"' => return Ok((out, i + 1)),
            b'\n' => return Err("newline in quoted string".into()),
            b'\\' => {
                let next = *b.get(i + 1).ok_or("dangling backslash")?;
                if !cook {
                    if next != b'"' {
                        out.push(b'\\');
                    }
                    out.push(next);
                    i += 2;
                    continue;
                }
                match next {
                    b'n' => out.push(b'\n'),
                    b't' => out.push(b'\t'),
                    b'r' => out.push(b'\r'),
                    b'\\' => out.push(b'\\'),
                    b'"' => out.push(b'"'),
                    b'x' => {
                        let hex = b
                            .get(i + 2..i + 4)
                            .and_then(|h| std::str::from_utf8(h).ok())
                            .and_then(|h| u8::from_str_radix(h, 16).ok())
                            .ok_or("bad \\x escape")?;
                        out.push(hex);
                        i += 4;
                        continue;
                    }
                    other => return Err(format!("unknown escape \\{}", other as char)),
                }
                i += 2;
            }
            c => {
                out.push(c);
                i += 1;
            }
        }
    }
    Err("unterminated string".into())
}

// nonterminals
const FILE: u32 = 0;
const RULES: u32 = 1;
const RULE: u32 = 2;
const PARAMS: u32 = 3;
const IDS: u32 = 4;
const ALT: u32 = 5;
const SEQ: u32 = 6;
const TERM: u32 = 7;
const ATOM: u32 = 8;

fn dsl_grammar() -> &'static Grammar {
    static G: OnceLock<Grammar> = OnceLock::new();
    G.get_or_init(|| {
        use Sym::{N, T};
        let p = |lhs, rhs: &[Sym]| Production { lhs, rhs: rhs.to_vec() };
        Grammar::new(
            FILE,
            vec![
                p(FILE, &[N(RULES)]),                              // 0
                p(RULES, &[]),                                     // 1
                p(RULES, &[N(RULES), N(RULE)]),                    // 2
                p(RULE, &[T(IDENT), N(PARAMS), T(DEFINE), N(ALT), T(SEMI)]), // 3
                p(PARAMS, &[]),                                    // 4
                p(PARAMS, &[T(LPAREN), T(RPAREN)]),                // 5
                p(PARAMS, &[T(LPAREN), N(IDS), T(RPAREN)]),        // 6
                p(IDS, &[T(IDENT)]),                               // 7
                p(IDS, &[N(IDS), T(COMMA), T(IDENT)]),             // 8
                p(ALT, &[N(SEQ)]),                                 // 9
                p(ALT, &[N(ALT), T(BAR), N(SEQ)]),                 // 10
                p(SEQ, &[N(TERM)]),                                // 11
                p(SEQ, &[N(SEQ), N(TERM)]),                        // 12
                p(TERM, &[N(ATOM)]),                               // 13
                p(TERM, &[N(ATOM), T(STAR)]),                      // 14
                p(TERM, &[N(ATOM), T(PLUS)]),                      // 15
                p(TERM, &[N(ATOM), T(QUEST)]),                     // 16
                p(ATOM, &[T(STRING)]),                             // 17
                p(ATOM, &[T(REGEX)]),                              // 18
                p(ATOM, &[T(IDENT)]),                              // 19
                p(ATOM, &[T(LBRACE), T(IDENT), T(RBRACE)]),        // 20
                p(ATOM, &[T(LPAREN), N(ALT), T(RPAREN)]),          // 21
            ],
        )
    })
}

#[derive(Debug, Clone)]
struct Pos {
    line: usize,
    col: usize,
}

#[derive(Debug, Clone)]
enum RuleExpr {
    Terminal(Vec<u8>, String, Pos),
    Regex(String, Pos),
    Ref(String, Pos),
    Slot(String, Pos),
    Seq(Vec<RuleExpr>),
    Alt(Box<RuleExpr>, Box<RuleExpr>),
    Star(Box<RuleExpr>),
    Plus(Box<RuleExpr>),
    Opt(Box<RuleExpr>),
}

#[derive(Debug, Clone)]
struct RuleDef {
    name: String,
    params: Vec<String>,
    body: RuleExpr,
    pos: Pos,
}

struct TreeReader<'a> {
    lex: &'a [Lexeme],
}

impl TreeReader<'_> {
    fn leaf(&self, t: &Tree) -> &Lexeme {
        match t {
            Tree::Leaf(i) => &self.lex[*i],
            Tree::Node { .. } => unreachable!("expected leaf"),
        }
    }

    fn pos(&self, t: &Tree) -> Pos {
        let l = self.leaf(t);
        Pos { line: l.line, col: l.col }
    }

    fn rules(&self, t: &Tree, out: &mut Vec<RuleDef>) {
        let Tree::Node { prod, children } = t else { unreachable!() };
        match prod {
            0 => self.rules(&children[0], out),
            1 => {}
            2 => {
                self.rules(&children[0], out);
                out.push(self.rule(&children[1]));
            }
            _ => unreachable!("rules production {prod}"),
        }
    }

    fn rule(&self, t: &Tree) -> RuleDef {
        let Tree::Node { children, .. } = t else { unreachable!() };
        let mut params = Vec::new();
        self.params(&children[1], &mut params);
        RuleDef {
            name: self.leaf(&children[0]).text.clone(),
            pos: self.pos(&children[0]),
            params,
            body: self.expr(&children[3]),
        }
    }

    fn params(&self, t: &Tree, out: &mut Vec<String>) {
        let Tree::Node { prod, children } = t else { unreachable!() };
        match prod {
            4 | 5 => {}
            6 => self.params(&children[1], out),
            7 => out.push(self.leaf(&children[0]).text.clone()),
            8 => {
                self.params(&children[0], out);
                out.push(self.leaf(&children[2]).text.clone());
            }
            _ => unreachable!("params production {prod}"),
        }
    }

    fn expr(&self, t: &Tree) -> RuleExpr {
        let Tree::Node { prod, children } = t else { unreachable!() };
        match prod {
            9 | 13 => self.expr(&children[0]),
            10 => RuleExpr::Alt(Box::new(self.expr(&children[0])), Box::new(self.expr(&children[2]))),
            11 => RuleExpr::Seq(vec![self.expr(&children[0])]),
            12 => {
                let mut items = match self.expr(&children[0]) {
                    RuleExpr::Seq(items) => items,
                    other => vec![other],
                };
                items.push(self.expr(&children[1]));
                RuleExpr::Seq(items)
            }
            14 => RuleExpr::Star(Box::new(self.expr(&children[0]))),
            15 => RuleExpr::Plus(Box::new(self.expr(&children[0]))),
            16 => RuleExpr::Opt(Box::new(self.expr(&children[0]))),
            17 => {
                let l = self.leaf(&children[0]);
                RuleExpr::Terminal(l.bytes.clone(), l.text.clone(), self.pos(&children[0]))
            }
            18 => RuleExpr::Regex(self.leaf(&children[0]).text.clone(), self.pos(&children[0])),
            19 => RuleExpr::Ref(self.leaf(&children[0]).text.clone(), self.pos(&children[0])),
            20 => RuleExpr::Slot(self.leaf(&children[1]).text.clone(), self.pos(&children[1])),
            21 => self.expr(&children[1]),
            _ => unreachable!("expr production {prod}"),
        }
    }
}

/// Resolved, reference-free template body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum TemplateNode {
    /// `text` is the terminal as written (quotes included), `ids` its tokens.
    Write { text: String, ids: Vec<TokenId> },
    Slot { name: String },
    Regex { pattern: String },
    Seq { items: Vec<TemplateNode> },
    Alt { left: Box<TemplateNode>, right: Box<TemplateNode> },
    Star { inner: Box<TemplateNode> },
    Plus { inner: Box<TemplateNode> },
    Opt { inner: Box<TemplateNode> },
}

impl TemplateNode {
    fn label(&self) -> String {
        match self {
            TemplateNode::Write { text, .. } => text.clone(),
            TemplateNode::Slot { name } => format!("{{{name}}}"),
            TemplateNode::Regex { pattern } => format!("re\"{pattern}\""),
            TemplateNode::Seq { items } => items.iter().map(|i| i.label()).collect::<Vec<_>>().join(" "),
            TemplateNode::Alt { left, right } => format!("{} | {}", left.label(), right.label()),
            TemplateNode::Star { inner } => format!("({})*", inner.label()),
            TemplateNode::Plus { inner } => format!("({})+", inner.label()),
            TemplateNode::Opt { inner } => format!("({})?", inner.label()),
        }
    }

    fn collect(&self, f: &mut impl FnMut(&TemplateNode)) {
        f(self);
        match self {
            TemplateNode::Seq { items } => items.iter().for_each(|i| i.collect(f)),
            TemplateNode::Alt { left, right } => {
                left.collect(f);
                right.collect(f);
            }
            TemplateNode::Star { inner } | TemplateNode::Plus { inner } | TemplateNode::Opt { inner } => inner.collect(f),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FactoryStats {
    pub structures: usize,
    pub terminals: usize,
    pub placeholders: usize,
    pub compile_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FactoryDump {
    version: u32,
    vocab_size: usize,
    eos_id: TokenId,
    token_ids: BTreeMap<String, Vec<TokenId>>,
    structures: BTreeMap<String, TemplateNode>,
    arg_names: BTreeMap<String, Vec<String>>,
}

/// Precompiled templates: terminal token ids, structure bodies, and the
/// argument names each structure takes. Immutable after construction.
#[derive(Debug, Clone)]
pub struct StructureFactory {
    token_ids: BTreeMap<String, Vec<TokenId>>,
    structures: BTreeMap<String, TemplateNode>,
    arg_names: BTreeMap<String, Vec<String>>,
    regexes: HashMap<String, Arc<Pattern>>,
    vocab_size: usize,
    eos_id: TokenId,
    compile_ms: f64,
}

impl PartialEq for StructureFactory {
    fn eq(&self, other: &Self) -> bool {
        self.token_ids == other.token_ids
            && self.structures == other.structures
            && self.arg_names == other.arg_names
            && self.vocab_size == other.vocab_size
            && self.eos_id == other.eos_id
    }
}

impl StructureFactory {
    /// Factory with no structures, for requests made only of inline items.
    pub fn empty(vocab: &Vocabulary) -> Self {
        StructureFactory {
            token_ids: BTreeMap::new(),
            structures: BTreeMap::new(),
            arg_names: BTreeMap::new(),
            regexes: HashMap::new(),
            vocab_size: vocab.len(),
            eos_id: vocab.eos_id(),
            compile_ms: 0.0,
        }
    }

    pub fn structure(&self, name: &str) -> Option<&TemplateNode> {
        self.structures.get(name)
    }

    pub fn arg_names(&self, name: &str) -> Option<&[String]> {
        self.arg_names.get(name).map(Vec::as_slice)
    }

    pub fn structure_names(&self) -> impl Iterator<Item = &str> {
        self.structures.keys().map(String::as_str)
    }

    pub fn token_ids(&self, terminal: &str) -> Option<&[TokenId]> {
        self.token_ids.get(terminal).map(Vec::as_slice)
    }

    pub fn stats(&self) -> FactoryStats {
        FactoryStats {
            structures: self.structures.len(),
            terminals: self.token_ids.len(),
            placeholders: self.arg_names.values().map(Vec::len).sum(),
            compile_ms: self.compile_ms,
        }
    }

    /// Same size and eos, and every stored terminal still spells its text.
    pub fn is_compatible(&self, vocab: &Vocabulary) -> bool {
        self.vocab_size == vocab.len() && self.eos_id == vocab.eos_id() && self.mismatched_terminal(vocab).is_none()
    }

    fn mismatched_terminal(&self, vocab: &Vocabulary) -> Option<&str> {
        self.token_ids
            .iter()
            .find(|(text, ids)| {
                // keys are source literals, quotes included
                let cooked = scan_quoted(text.as_bytes(), 1, true).map(|(b, _)| b);
                ids.iter().any(|id| *id == vocab.eos_id()) || cooked.ok().as_deref() != Some(&vocab.detokenize(ids)[..])
            })
            .map(|(text, _)| text.as_str())
    }

    /// Builds the pattern for structure `name` with slots bound to `args`.
    /// Missing structures or arguments are the caller's responsibility.
    pub fn instantiate(&self, name: &str, args: &HashMap<&str, Arc<Pattern>>) -> Option<Arc<Pattern>> {
        let node = self.structures.get(name)?;
        self.build(node, args)
    }

    fn build(&self, node: &TemplateNode, args: &HashMap<&str, Arc<Pattern>>) -> Option<Arc<Pattern>> {
        Some(match node {
            TemplateNode::Write { text, ids } => {
                if ids.is_empty() {
                    Pattern::seq(Vec::new(), text.clone())
                } else {
                    Pattern::lit(ids.clone(), text.clone())
                }
            }
            TemplateNode::Slot { name } => Arc::clone(args.get(name.as_str())?),
            TemplateNode::Regex { pattern } => Arc::clone(self.regexes.get(pattern)?),
            TemplateNode::Seq { items } => {
                let parts = items.iter().map(|i| self.build(i, args)).collect::<Option<Vec<_>>>()?;
                if parts.len() == 1 {
                    parts.into_iter().next().unwrap()
                } else {
                    Pattern::seq(parts, node.label())
                }
            }
            TemplateNode::Alt { left, right } => {
                Pattern::alt(self.build(left, args)?, self.build(right, args)?, node.label())
            }
            TemplateNode::Star { inner } => Pattern::star(self.build(inner, args)?),
            TemplateNode::Plus { inner } => Pattern::plus(self.build(inner, args)?),
            TemplateNode::Opt { inner } => Pattern::opt(self.build(inner, args)?),
        })
    }

    /// Versioned JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let dump = FactoryDump {
            version: FACTORY_VERSION,
            vocab_size: self.vocab_size,
            eos_id: self.eos_id,
            token_ids: self.token_ids.clone(),
            structures: self.structures.clone(),
            arg_names: self.arg_names.clone(),
        };
        serde_json::to_string_pretty(&dump).expect("factory serializes")
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self, TemplateError> {
        let dump: FactoryDump = serde_json::from_str(text).map_err(|e| TemplateError::Dump(e.to_string()))?;
        if dump.version != FACTORY_VERSION {
            return Err(TemplateError::Dump(format!("unsupported version {}", dump.version)));
        }
        if dump.vocab_size != vocab.len() || dump.eos_id != vocab.eos_id() {
            return Err(TemplateError::Dump(format!(
                "factory built for vocabulary of size {} (eos {}), got {} (eos {})",
                dump.vocab_size,
                dump.eos_id,
                vocab.len(),
                vocab.eos_id()
            )));
        }
        let mut factory = StructureFactory {
            token_ids: dump.token_ids,
            structures: dump.structures,
            arg_names: dump.arg_names,
            regexes: HashMap::new(),
            vocab_size: dump.vocab_size,
            eos_id: dump.eos_id,
            compile_ms: 0.0,
        };
        if let Some(text) = factory.mismatched_terminal(vocab) {
            return Err(TemplateError::Dump(format!("terminal {text:?} does not match this vocabulary")));
        }
        let mut regexes = HashMap::new();
        for node in factory.structures.values() {
            let mut err = None;
            node.collect(&mut |n| {
                if let TemplateNode::Regex { pattern } = n {
                    if err.is_none() && !regexes.contains_key(pattern) {
                        match lower_regex(pattern, vocab, &Pos { line: 0, col: 0 }) {
                            Ok(p) => {
                                regexes.insert(pattern.clone(), p);
                            }
                            Err(e) => err = Some(e),
                        }
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        factory.regexes = regexes;
        Ok(factory)
    }
}

fn lower_regex(pattern: &str, vocab: &Vocabulary, pos: &Pos) -> Result<Arc<Pattern>, TemplateError> {
    let ast = regex::parse_regex(pattern).map_err(|source| TemplateError::Regex {
        line: pos.line,
        col: pos.col,
        source,
    })?;
    regex::lower(&ast, vocab).map_err(|source| TemplateError::RegexLowering {
        line: pos.line,
        col: pos.col,
        source,
    })
}

fn parse_rules(src: &str) -> Result<Vec<RuleDef>, TemplateError> {
    let lexemes = lex(src)?;
    let kinds: Vec<u32> = lexemes.iter().map(|l| l.kind).collect();
    let at = |i: usize| -> (usize, usize) {
        lexemes
            .get(i)
            .map(|l| (l.line, l.col))
            .unwrap_or_else(|| {
                let lines = src.split('\n').count();
                (lines, src.rsplit('\n').next().map_or(0, str::len) + 1)
            })
    };
    let chart = earley::parse(dsl_grammar(), &kinds).map_err(|e| match e {
        EarleyError::Unexpected { pos } => {
            let (line, col) = at(pos);
            TemplateError::Parse {
                line,
                col,
                msg: format!("unexpected {} {:?}", KIND_NAMES[lexemes[pos].kind as usize], lexemes[pos].text),
            }
        }
        _ => {
            let (line, col) = at(lexemes.len());
            TemplateError::Parse {
                line,
                col,
                msg: "unexpected end of input".into(),
            }
        }
    })?;
    let tree = chart.tree().map_err(|e| match e {
        EarleyError::Ambiguous {
            start,
            end,
            first,
            second,
            ..
        } => {
            let (line, col) = at(start);
            let (end_line, end_col) = at(end.saturating_sub(1));
            TemplateError::Ambiguous {
                line,
                col,
                end_line,
                end_col,
                first,
                second,
            }
        }
        _ => TemplateError::Parse {
            line: 1,
            col: 1,
            msg: "no parse".into(),
        },
    })?;
    let mut rules = Vec::new();
    TreeReader { lex: &lexemes }.rules(&tree, &mut rules);
    Ok(rules)
}

/// Parses and compiles a template file against `vocab`.
pub fn compile_templates(src: &str, vocab: &Vocabulary) -> Result<StructureFactory, TemplateError> {
    let started = Instant::now();
    let rules = parse_rules(src)?;
    if rules.is_empty() {
        return Err(TemplateError::Empty);
    }
    let mut by_name: BTreeMap<&str, &RuleDef> = BTreeMap::new();
    for r in &rules {
        if by_name.insert(&r.name, r).is_some() {
            return Err(TemplateError::DuplicateRule {
                name: r.name.clone(),
                line: r.pos.line,
                col: r.pos.col,
            });
        }
    }
    for r in &rules {
        check_refs(&r.body, &by_name)?;
        check_slots(r)?;
    }
    check_acyclic(&rules, &by_name)?;

    let mut ctx = Resolver {
        vocab,
        rules: &by_name,
        token_ids: BTreeMap::new(),
        regexes: HashMap::new(),
        resolved: HashMap::new(),
    };
    let mut structures = BTreeMap::new();
    let mut arg_names = BTreeMap::new();
    for r in &rules {
        let node = ctx.resolve_rule(&r.name)?;
        let mut used = BTreeSet::new();
        node.collect(&mut |n| {
            if let TemplateNode::Slot { name } = n {
                used.insert(name.clone());
            }
        });
        let declared: BTreeSet<String> = r.params.iter().cloned().collect();
        if declared != used || declared.len() != r.params.len() {
            return Err(TemplateError::ParamMismatch {
                rule: r.name.clone(),
                declared: r.params.clone(),
                used: used.into_iter().collect(),
            });
        }
        structures.insert(r.name.clone(), node);
        arg_names.insert(r.name.clone(), r.params.clone());
    }
    Ok(StructureFactory {
        token_ids: ctx.token_ids,
        structures,
        arg_names,
        regexes: ctx.regexes,
        vocab_size: vocab.len(),
        eos_id: vocab.eos_id(),
        compile_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

fn check_refs(e: &RuleExpr, rules: &BTreeMap<&str, &RuleDef>) -> Result<(), TemplateError> {
    match e {
        RuleExpr::Ref(name, pos) if !rules.contains_key(name.as_str()) => Err(TemplateError::Undefined {
            name: name.clone(),
            line: pos.line,
            col: pos.col,
        }),
        RuleExpr::Seq(items) => items.iter().try_for_each(|i| check_refs(i, rules)),
        RuleExpr::Alt(a, b) => {
            check_refs(a, rules)?;
            check_refs(b, rules)
        }
        RuleExpr::Star(a) | RuleExpr::Plus(a) | RuleExpr::Opt(a) => check_refs(a, rules),
        _ => Ok(()),
    }
}

fn check_slots(rule: &RuleDef) -> Result<(), TemplateError> {
    fn walk<'a>(e: &'a RuleExpr, seen: &mut BTreeSet<&'a str>, rule: &RuleDef) -> Result<(), TemplateError> {
        match e {
            RuleExpr::Slot(name, pos) => {
                if !seen.insert(name) {
                    return Err(TemplateError::DuplicatePlaceholder {
                        rule: rule.name.clone(),
                        name: name.clone(),
                        line: pos.line,
                        col: pos.col,
                    });
                }
                Ok(())
            }
            RuleExpr::Seq(items) => items.iter().try_for_each(|i| walk(i, seen, rule)),
            RuleExpr::Alt(a, b) => {
                walk(a, seen, rule)?;
                walk(b, seen, rule)
            }
            RuleExpr::Star(a) | RuleExpr::Plus(a) | RuleExpr::Opt(a) => walk(a, seen, rule),
            _ => Ok(()),
        }
    }
    walk(&rule.body, &mut BTreeSet::new(), rule)
}

fn refs_of(e: &RuleExpr, out: &mut Vec<String>) {
    match e {
        RuleExpr::Ref(name, _) => out.push(name.clone()),
        RuleExpr::Seq(items) => items.iter().for_each(|i| refs_of(i, out)),
        RuleExpr::Alt(a, b) => {
            refs_of(a, out);
            refs_of(b, out);
        }
        RuleExpr::Star(a) | RuleExpr::Plus(a) | RuleExpr::Opt(a) => refs_of(a, out),
        _ => {}
    }
}

fn check_acyclic(rules: &[RuleDef], by_name: &BTreeMap<&str, &RuleDef>) -> Result<(), TemplateError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Open,
        Done,
    }
    fn visit(
        name: &str,
        by_name: &BTreeMap<&str, &RuleDef>,
        marks: &mut HashMap<String, Mark>,
        stack: &mut Vec<String>,
    ) -> Result<(), TemplateError> {
        match marks.get(name) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Open) => {
                let start = stack.iter().position(|s| s == name).unwrap_or(0);
                let mut cycle = stack[start..].to_vec();
                cycle.push(name.to_string());
                return Err(TemplateError::Recursive { cycle });
            }
            None => {}
        }
        marks.insert(name.to_string(), Mark::Open);
        stack.push(name.to_string());
        let mut refs = Vec::new();
        refs_of(&by_name[name].body, &mut refs);
        for r in refs {
            visit(&r, by_name, marks, stack)?;
        }
        stack.pop();
        marks.insert(name.to_string(), Mark::Done);
        Ok(())
    }
    let mut marks = HashMap::new();
    for r in rules {
        visit(&r.name, by_name, &mut marks, &mut Vec::new())?;
    }
    Ok(())
}

struct Resolver<'a> {
    vocab: &'a Vocabulary,
    rules: &'a BTreeMap<&'a str, &'a RuleDef>,
    token_ids: BTreeMap<String, Vec<TokenId>>,
    regexes: HashMap<String, Arc<Pattern>>,
    resolved: HashMap<String, TemplateNode>,
}

impl Resolver<'_> {
    fn resolve_rule(&mut self, name: &str) -> Result<TemplateNode, TemplateError> {
        if let Some(n) = self.resolved.get(name) {
            return Ok(n.clone());
        }
        let rule = self.rules[name];
        let node = self.resolve(&rule.body)?;
        self.resolved.insert(name.to_string(), node.clone());
        Ok(node)
    }

    fn resolve(&mut self, e: &RuleExpr) -> Result<TemplateNode, TemplateError> {
        Ok(match e {
            RuleExpr::Terminal(bytes, text, pos) => {
                let ids = self.vocab.tokenize(bytes).map_err(|_| TemplateError::Unresolvable {
                    text: escape(bytes),
                    line: pos.line,
                    col: pos.col,
                })?;
                self.token_ids.insert(text.clone(), ids.clone());
                TemplateNode::Write { text: text.clone(), ids }
            }
            RuleExpr::Regex(pattern, pos) => {
                if !self.regexes.contains_key(pattern) {
                    let lowered = lower_regex(pattern, self.vocab, pos)?;
                    self.regexes.insert(pattern.clone(), lowered);
                }
                TemplateNode::Regex { pattern: pattern.clone() }
            }
            RuleExpr::Ref(name, _) => self.resolve_rule(name)?,
            RuleExpr::Slot(name, _) => TemplateNode::Slot { name: name.clone() },
            RuleExpr::Seq(items) => {
                let items = items.iter().map(|i| self.resolve(i)).collect::<Result<Vec<_>, _>>()?;
                if items.len() == 1 {
                    items.into_iter().next().unwrap()
                } else {
                    TemplateNode::Seq { items }
                }
            }
            RuleExpr::Alt(a, b) => TemplateNode::Alt {
                left: Box::new(self.resolve(a)?),
                right: Box::new(self.resolve(b)?),
            },
            RuleExpr::Star(a) => TemplateNode::Star {
                inner: Box::new(self.resolve(a)?),
            },
            RuleExpr::Plus(a) => TemplateNode::Plus {
                inner: Box::new(self.resolve(a)?),
            },
            RuleExpr::Opt(a) => TemplateNode::Opt {
                inner: Box::new(self.resolve(a)?),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let mut toks: Vec<String> = (b' '..=b'~').map(|b| (b as char).to_string()).collect();
        toks.extend(["<h1>", "</h1>", "<eos>"].map(String::from));
        let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
        Vocabulary::from_strs(&refs, "<eos>").unwrap()
    }

    #[test]
    fn section_start_rule() {
        let v = vocab();
        let f = compile_templates("SECTION_START(title) ::= \"<h1>\" {title} \"</h1>\" ;", &v).unwrap();
        assert_eq!(f.arg_names("SECTION_START").unwrap(), &["title".to_string()]);
        let h1 = v.id_of(b"<h1>").unwrap();
        let h1c = v.id_of(b"</h1>").unwrap();
        assert_eq!(
            f.structure("SECTION_START").unwrap(),
            &TemplateNode::Seq {
                items: vec![
                    TemplateNode::Write {
                        text: "\"<h1>\"".into(),
                        ids: vec![h1]
                    },
                    TemplateNode::Slot { name: "title".into() },
                    TemplateNode::Write {
                        text: "\"</h1>\"".into(),
                        ids: vec![h1c]
                    },
                ]
            }
        );
        assert_eq!(f.stats().structures, 1);
        assert_eq!(f.stats().terminals, 2);
        assert_eq!(f.stats().placeholders, 1);
    }

    #[test]
    fn empty_body_is_parse_error() {
        let err = compile_templates("x ::= ;", &vocab()).unwrap_err();
        assert!(matches!(err, TemplateError::Parse { line: 1, col: 7, .. }), "{err:?}");
    }

    #[test]
    fn recursion_rejected() {
        let err = compile_templates("x ::= x \"a\" ;", &vocab()).unwrap_err();
        assert_eq!(
            err,
            TemplateError::Recursive {
                cycle: vec!["x".into(), "x".into()]
            }
        );
        let err = compile_templates("a ::= b ; b ::= \"q\" a ;", &vocab()).unwrap_err();
        assert!(matches!(err, TemplateError::Recursive { .. }));
    }

    #[test]
    fn undefined_and_duplicates() {
        let v = vocab();
        assert!(matches!(
            compile_templates("a ::= nope ;", &v),
            Err(TemplateError::Undefined { line: 1, col: 7, .. })
        ));
        assert!(matches!(
            compile_templates("a ::= \"x\" ;\na ::= \"y\" ;", &v),
            Err(TemplateError::DuplicateRule { line: 2, .. })
        ));
        assert!(matches!(
            compile_templates("a(t) ::= {t} {t} ;", &v),
            Err(TemplateError::DuplicatePlaceholder { .. })
        ));
        assert!(matches!(compile_templates("a(t) ::= \"x\" ;", &v), Err(TemplateError::ParamMismatch { .. })));
        assert_eq!(compile_templates("# nothing\n", &v), Err(TemplateError::Empty));
    }

    #[test]
    fn unresolvable_terminal() {
        let err = compile_templates("a ::= \"\\x01\" ;", &vocab()).unwrap_err();
        assert!(matches!(err, TemplateError::Unresolvable { .. }), "{err:?}");
    }

    #[test]
    fn references_inline_and_share_slots() {
        let v = vocab();
        let src = "\
# two rules
HEAD(title) ::= \"<h1>\" {title} \"</h1>\" ;
SECTION(title) ::= HEAD (re\"[a-z]+\" \" \")* ;
";
        let f = compile_templates(src, &v).unwrap();
        assert_eq!(f.stats().structures, 2);
        assert_eq!(f.arg_names("SECTION").unwrap(), &["title".to_string()]);
        let TemplateNode::Seq { items } = f.structure("SECTION").unwrap() else { panic!() };
        assert_eq!(items.len(), 2);
        assert!(matches!(items[1], TemplateNode::Star { .. }));
    }

    #[test]
    fn bad_regex_reports_position() {
        let err = compile_templates("a ::= \"x\"\n  re\"a{2}\" ;", &vocab()).unwrap_err();
        assert!(matches!(err, TemplateError::Regex { line: 2, col: 3, .. }), "{err:?}");
    }

    #[test]
    fn dump_round_trip() {
        let v = vocab();
        let src = "H(t) ::= \"<h1>\" {t} \"</h1>\" re\"[^<]*\" ; B ::= (\"a\" | \"b\")+ \"c\"? ;";
        let f = compile_templates(src, &v).unwrap();
        let json = f.to_json();
        let g = StructureFactory::from_json(&json, &v).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_json(), json);
    }

    #[test]
    fn dump_rejects_other_vocab() {
        let v = vocab();
        let f = compile_templates("a ::= \"x\" ;", &v).unwrap();
        let other = Vocabulary::from_strs(&["x", "<eos>"], "<eos>").unwrap();
        assert!(matches!(StructureFactory::from_json(&f.to_json(), &other), Err(TemplateError::Dump(_))));
    }
}
