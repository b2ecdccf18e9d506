//! Online request parsing and operator construction.
//!
//! A request is a format expression plus string arguments:
//!
//! ```text
//! SECTION(title={t}) (SUBSECTION(title="A") re"[^<]*")+ "done"
//! ```
//!
//! Items are structure invocations, quoted literals, `re"..."` snippets,
//! `{name}` argument references and parenthesized groups with optional
//! `*`, `+` or `?`. The expression is parsed with an LALR(1) table built
//! once per process, so parsing is linear and never touches the Earley
//! parser used for template files.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::earley::{self, Grammar, Production, Sym};
use crate::lalr::{LalrError, Table};
use crate::operators::Operator;
use crate::pattern::{compile_pattern, CompileError, Pattern};
use crate::regex::{self, RegexError};
use crate::template::{scan_quoted, StructureFactory};
use crate::vocab::{escape, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum FrontendError {
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("regex at offset {pos}: {source}")]
    Regex { pos: usize, source: RegexError },
    #[error("unknown structure `{name}` at offset {pos}")]
    UnknownStructure { name: String, pos: usize },
    #[error("structure `{structure}` requires argument `{arg}`")]
    MissingArg { structure: String, arg: String },
    #[error("structure `{structure}` has no argument `{arg}`")]
    UnknownArg { structure: String, arg: String },
    #[error("argument `{arg}` of `{structure}` given twice")]
    DuplicateArg { structure: String, arg: String },
    #[error("`{{{name}}}` at offset {pos} is not bound in the request arguments")]
    UnboundRef { name: String, pos: usize },
    #[error("text {text:?} cannot be tokenized with this vocabulary")]
    Unresolvable { text: String },
    #[error("factory was compiled for a different vocabulary")]
    IncompatibleFactory,
    #[error(transparent)]
    Compile(#[from] CompileError),
}

/// Request document: `{"format": "...", "args": {"name": "value"}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestDoc {
    pub format: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl RequestDoc {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn parse(&self, factory: &StructureFactory) -> Result<RequestFormat, FrontendError> {
        parse_request(&self.format, &self.args, factory)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArgValue {
    Text(Vec<u8>),
    Regex(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Repeat {
    Once,
    Star,
    Plus,
    Opt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestItem {
    Invoke { name: String, args: Vec<(String, ArgValue)> },
    Literal(Vec<u8>),
    Regex(String),
    Group { items: Vec<RequestItem>, repeat: Repeat },
}

/// Validated request: every name exists and every argument is bound.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestFormat {
    pub items: Vec<RequestItem>,
}

impl RequestFormat {
    pub fn invocations(&self) -> usize {
        fn count(items: &[RequestItem]) -> usize {
            items
                .iter()
                .map(|i| match i {
                    RequestItem::Invoke { .. } => 1,
                    RequestItem::Group { items, .. } => count(items),
                    _ => 0,
                })
                .sum()
        }
        count(&self.items)
    }
}

fn quote(bytes: &[u8]) -> String {
    let mut s = String::from("\"");
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\r' => s.push_str("\\r"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s.push('"');
    s
}

fn quote_regex(src: &str) -> String {
    format!("re\"{}\"", src.replace('"', "\\\""))
}

impl fmt::Display for RequestItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RequestItem::Invoke { name, args } => {
                write!(f, "{name}(")?;
                for (i, (k, v)) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    match v {
                        ArgValue::Text(t) => write!(f, "{k}={}", quote(t))?,
                        ArgValue::Regex(r) => write!(f, "{k}={}", quote_regex(r))?,
                    }
                }
                f.write_str(")")
            }
            RequestItem::Literal(t) => f.write_str(&quote(t)),
            RequestItem::Regex(r) => f.write_str(&quote_regex(r)),
            RequestItem::Group { items, repeat } => {
                f.write_str("(")?;
                write_items(f, items)?;
                f.write_str(")")?;
                f.write_str(match repeat {
                    Repeat::Once => "",
                    Repeat::Star => "*",
                    Repeat::Plus => "+",
                    Repeat::Opt => "?",
                })
            }
        }
    }
}

fn write_items(f: &mut fmt::Formatter<'_>, items: &[RequestItem]) -> fmt::Result {
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(" ")?;
        }
        write!(f, "{item}")?;
    }
    Ok(())
}

/// Canonical expression with arguments substituted.
impl fmt::Display for RequestFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_items(f, &self.items)
    }
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
const EQ: u32 = 8;
const STAR: u32 = 9;
const PLUS: u32 = 10;
const QUEST: u32 = 11;

const KIND_NAMES: [&str; 12] = [
    "identifier", "string", "regex", "'('", "')'", "'{'", "'}'", "','", "'='", "'*'", "'+'", "'?'",
];

#[derive(Debug, Clone)]
struct Lexeme {
    kind: u32,
    pos: usize,
    text: String,
    bytes: Vec<u8>,
}

fn lex(src: &str) -> Result<Vec<Lexeme>, FrontendError> {
    let b = src.as_bytes();
    let mut out = Vec::with_capacity(b.len() / 4);
    let mut i = 0;
    while i < b.len() {
        let pos = i;
        let err = |msg: String| FrontendError::Syntax { pos, msg };
        let punct = match b[i] {
            b'(' => Some(LPAREN),
            b')' => Some(RPAREN),
            b'{' => Some(LBRACE),
            b'}' => Some(RBRACE),
            b',' => Some(COMMA),
            b'=' => Some(EQ),
            b'*' => Some(STAR),
            b'+' => Some(PLUS),
            b'?' => Some(QUEST),
            _ => None,
        };
        if let Some(kind) = punct {
            out.push(Lexeme {
                kind,
                pos,
                text: String::new(),
                bytes: Vec::new(),
            });
            i += 1;
            continue;
        }
        match b[i] {
            b' ' | b'\t' | b'\r' | b'\n' => i += 1,
            b'"' => {
                let (bytes, end) = scan_quoted(b, i + 1, true).map_err(err)?;
                out.push(Lexeme {
                    kind: STRING,
                    pos,
                    text: String::new(),
                    bytes,
                });
                i = end;
            }
            b'r' if b.get(i + 1) == Some(&b'e') && b.get(i + 2) == Some(&b'"') => {
                let (bytes, end) = scan_quoted(b, i + 3, false).map_err(err)?;
                let text = String::from_utf8(bytes).map_err(|_| err("regex is not UTF-8".into()))?;
                out.push(Lexeme {
                    kind: REGEX,
                    pos,
                    text,
                    bytes: Vec::new(),
                });
                i = end;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < b.len() && (b[i].is_ascii_alphanumeric() || b[i] == b'_') {
                    i += 1;
                }
                out.push(Lexeme {
                    kind: IDENT,
                    pos,
                    text: src[pos..i].to_string(),
                    bytes: Vec::new(),
                });
            }
            c => return Err(err(format!("unexpected character {:?}", c as char))),
        }
    }
    Ok(out)
}

// nonterminals
const REQUEST: u32 = 0;
const ITEMS: u32 = 1;
const ITEM: u32 = 2;
const GROUP: u32 = 3;
const ATOM: u32 = 4;
const ARGS: u32 = 5;
const ARG: u32 = 6;
const VALUE: u32 = 7;

static TABLE_BUILDS: AtomicU64 = AtomicU64::new(0);

/// Number of times the request parse table has been constructed.
pub fn table_builds() -> u64 {
    TABLE_BUILDS.load(Ordering::Relaxed)
}

fn request_table() -> &'static Table {
    static T: OnceLock<Table> = OnceLock::new();
    T.get_or_init(|| {
        use Sym::{N, T};
        let p = |lhs, rhs: &[Sym]| Production { lhs, rhs: rhs.to_vec() };
        let g = Grammar::new(
            REQUEST,
            vec![
                p(REQUEST, &[N(ITEMS)]),                         // 0
                p(ITEMS, &[]),                                   // 1
                p(ITEMS, &[N(ITEMS), N(ITEM)]),                  // 2
                p(ITEM, &[N(ATOM)]),                             // 3
                p(ITEM, &[N(GROUP)]),                            // 4
                p(ITEM, &[N(GROUP), T(STAR)]),                   // 5
                p(ITEM, &[N(GROUP), T(PLUS)]),                   // 6
                p(ITEM, &[N(GROUP), T(QUEST)]),                  // 7
                p(GROUP, &[T(LPAREN), N(ITEMS), T(RPAREN)]),     // 8
                p(ATOM, &[T(IDENT), T(LPAREN), T(RPAREN)]),      // 9
                p(ATOM, &[T(IDENT), T(LPAREN), N(ARGS), T(RPAREN)]), // 10
                p(ATOM, &[T(STRING)]),                           // 11
                p(ATOM, &[T(REGEX)]),                            // 12
                p(ATOM, &[T(LBRACE), T(IDENT), T(RBRACE)]),      // 13
                p(ARGS, &[N(ARG)]),                              // 14
                p(ARGS, &[N(ARGS), T(COMMA), N(ARG)]),           // 15
                p(ARG, &[T(IDENT), T(EQ), N(VALUE)]),            // 16
                p(VALUE, &[T(STRING)]),                          // 17
                p(VALUE, &[T(REGEX)]),                           // 18
                p(VALUE, &[T(LBRACE), T(IDENT), T(RBRACE)]),     // 19
            ],
        );
        TABLE_BUILDS.fetch_add(1, Ordering::Relaxed);
        Table::build(&g).expect("request grammar is LALR(1)")
    })
}

#[derive(Debug)]
enum RawValue {
    Text(Vec<u8>),
    Regex(String, usize),
    Ref(String, usize),
}

#[derive(Debug)]
enum RawItem {
    Invoke {
        name: String,
        pos: usize,
        args: Vec<(String, RawValue)>,
    },
    Value(RawValue),
    Group(Vec<RawItem>, Repeat),
}

#[derive(Debug)]
enum Val {
    Tok(usize),
    Items(Vec<RawItem>),
    Item(RawItem),
    Args(Vec<(String, RawValue)>),
    Arg(String, RawValue),
    Value(RawValue),
}

fn parse_raw(src: &str) -> Result<Vec<RawItem>, FrontendError> {
    let lexemes = lex(src)?;
    let kinds: Vec<u32> = lexemes.iter().map(|l| l.kind).collect();
    let lx = &lexemes;
    let tok = |v: &mut Val| -> usize {
        match v {
            Val::Tok(i) => *i,
            _ => unreachable!("expected token"),
        }
    };
    let value_of = |i: usize| -> RawValue {
        let l = &lx[i];
        match l.kind {
            STRING => RawValue::Text(l.bytes.clone()),
            _ => RawValue::Regex(l.text.clone(), l.pos),
        }
    };
    let result = request_table().parse(&kinds, Val::Tok, |prod, mut c| match prod {
        0 => c.pop().unwrap(),
        1 => Val::Items(Vec::new()),
        2 => {
            let Some(Val::Item(item)) = c.pop() else { unreachable!() };
            let Some(Val::Items(mut items)) = c.pop() else { unreachable!() };
            items.push(item);
            Val::Items(items)
        }
        3..=7 => {
            let repeat = match prod {
                5 => Repeat::Star,
                6 => Repeat::Plus,
                7 => Repeat::Opt,
                _ => Repeat::Once,
            };
            match c.swap_remove(0) {
                Val::Item(RawItem::Group(items, _)) => Val::Item(RawItem::Group(items, repeat)),
                other => other,
            }
        }
        8 => {
            let Val::Items(items) = c.swap_remove(1) else { unreachable!() };
            Val::Item(RawItem::Group(items, Repeat::Once))
        }
        9 | 10 => {
            let i = tok(&mut c[0]);
            let args = if prod == 10 {
                let Val::Args(a) = c.swap_remove(2) else { unreachable!() };
                a
            } else {
                Vec::new()
            };
            Val::Item(RawItem::Invoke {
                name: lx[i].text.clone(),
                pos: lx[i].pos,
                args,
            })
        }
        11 | 12 => Val::Item(RawItem::Value(value_of(tok(&mut c[0])))),
        13 | 19 => {
            let i = tok(&mut c[1]);
            let v = RawValue::Ref(lx[i].text.clone(), lx[i].pos);
            if prod == 13 {
                Val::Item(RawItem::Value(v))
            } else {
                Val::Value(v)
            }
        }
        14 => {
            let Some(Val::Arg(k, v)) = c.pop() else { unreachable!() };
            Val::Args(vec![(k, v)])
        }
        15 => {
            let Some(Val::Arg(k, v)) = c.pop() else { unreachable!() };
            let Val::Args(mut args) = c.swap_remove(0) else { unreachable!() };
            args.push((k, v));
            Val::Args(args)
        }
        16 => {
            let Some(Val::Value(v)) = c.pop() else { unreachable!() };
            Val::Arg(lx[tok(&mut c[0])].text.clone(), v)
        }
        17 | 18 => Val::Value(value_of(tok(&mut c[0]))),
        _ => unreachable!("request production {prod}"),
    });
    match result {
        Ok(Val::Items(items)) => Ok(items),
        Ok(_) => unreachable!("start symbol yields items"),
        Err(LalrError::Unexpected { pos }) => Err(match lexemes.get(pos) {
            Some(l) => FrontendError::Syntax {
                pos: l.pos,
                msg: format!("unexpected {}", KIND_NAMES[l.kind as usize]),
            },
            None => FrontendError::Syntax {
                pos: src.len(),
                msg: "unexpected end of request".into(),
            },
        }),
        Err(e) => unreachable!("{e}"),
    }
}

/// Parses and validates a request expression against `factory`.
pub fn parse_request(
    text: &str,
    args: &BTreeMap<String, String>,
    factory: &StructureFactory,
) -> Result<RequestFormat, FrontendError> {
    let raw = parse_raw(text)?;
    Ok(RequestFormat {
        items: validate(raw, args, factory)?,
    })
}

fn resolve_value(v: RawValue, args: &BTreeMap<String, String>) -> Result<ArgValue, FrontendError> {
    match v {
        RawValue::Text(t) => Ok(ArgValue::Text(t)),
        RawValue::Regex(r, pos) => {
            regex::parse_regex(&r).map_err(|source| FrontendError::Regex { pos, source })?;
            Ok(ArgValue::Regex(r))
        }
        RawValue::Ref(name, pos) => match args.get(&name) {
            Some(t) => Ok(ArgValue::Text(t.as_bytes().to_vec())),
            None => Err(FrontendError::UnboundRef { name, pos }),
        },
    }
}

fn validate(
    raw: Vec<RawItem>,
    args: &BTreeMap<String, String>,
    factory: &StructureFactory,
) -> Result<Vec<RequestItem>, FrontendError> {
    raw.into_iter()
        .map(|item| {
            Ok(match item {
                RawItem::Invoke { name, pos, args: given } => {
                    let Some(expected) = factory.arg_names(&name) else {
                        return Err(FrontendError::UnknownStructure { name, pos });
                    };
                    let mut bound: Vec<(String, ArgValue)> = Vec::with_capacity(given.len());
                    for (k, v) in given {
                        if !expected.contains(&k) {
                            return Err(FrontendError::UnknownArg { structure: name, arg: k });
                        }
                        if bound.iter().any(|(b, _)| *b == k) {
                            return Err(FrontendError::DuplicateArg { structure: name, arg: k });
                        }
                        bound.push((k, resolve_value(v, args)?));
                    }
                    if let Some(missing) = expected.iter().find(|e| !bound.iter().any(|(b, _)| b == *e)) {
                        return Err(FrontendError::MissingArg {
                            structure: name,
                            arg: missing.clone(),
                        });
                    }
                    RequestItem::Invoke { name, args: bound }
                }
                RawItem::Value(v) => match resolve_value(v, args)? {
                    ArgValue::Text(t) => RequestItem::Literal(t),
                    ArgValue::Regex(r) => RequestItem::Regex(r),
                },
                RawItem::Group(items, repeat) => RequestItem::Group {
                    items: validate(items, args, factory)?,
                    repeat,
                },
            })
        })
        .collect()
}

fn text_pattern(text: &[u8], vocab: &Vocabulary) -> Result<Arc<Pattern>, FrontendError> {
    let label = quote(text);
    if text.is_empty() {
        return Ok(Pattern::seq(Vec::new(), label));
    }
    let ids = vocab.tokenize(text).map_err(|_| FrontendError::Unresolvable { text: escape(text) })?;
    Ok(Pattern::lit(ids, label))
}

fn regex_pattern(src: &str, vocab: &Vocabulary) -> Result<Arc<Pattern>, FrontendError> {
    let ast = regex::parse_regex(src).map_err(|source| FrontendError::Regex { pos: 0, source })?;
    Ok(regex::lower(&ast, vocab)?)
}

fn items_pattern(
    items: &[RequestItem],
    factory: &StructureFactory,
    vocab: &Vocabulary,
) -> Result<Arc<Pattern>, FrontendError> {
    let mut parts = items
        .iter()
        .map(|i| item_pattern(i, factory, vocab))
        .collect::<Result<Vec<_>, _>>()?;
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    let label = items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    Ok(Pattern::seq(parts, label))
}

fn item_pattern(item: &RequestItem, factory: &StructureFactory, vocab: &Vocabulary) -> Result<Arc<Pattern>, FrontendError> {
    match item {
        RequestItem::Invoke { name, args } => {
            let mut bound: HashMap<&str, Arc<Pattern>> = HashMap::with_capacity(args.len());
            for (k, v) in args {
                let p = match v {
                    ArgValue::Text(t) => text_pattern(t, vocab)?,
                    ArgValue::Regex(r) => regex_pattern(r, vocab)?,
                };
                bound.insert(k.as_str(), p);
            }
            Ok(factory
                .instantiate(name, &bound)
                .expect("validated request names a structure with all arguments bound"))
        }
        RequestItem::Literal(t) => text_pattern(t, vocab),
        RequestItem::Regex(r) => regex_pattern(r, vocab),
        RequestItem::Group { items, repeat } => {
            let inner = items_pattern(items, factory, vocab)?;
            Ok(match repeat {
                Repeat::Once => inner,
                Repeat::Star => Pattern::star(inner),
                Repeat::Plus => Pattern::plus(inner),
                Repeat::Opt => Pattern::opt(inner),
            })
        }
    }
}

/// Instantiates templates and compiles the request into an operator tree.
pub fn build_operators(
    fmt: &RequestFormat,
    factory: &StructureFactory,
    vocab: &Vocabulary,
) -> Result<Operator, FrontendError> {
    if !factory.is_compatible(vocab) {
        return Err(FrontendError::IncompatibleFactory);
    }
    let pattern = items_pattern(&fmt.items, factory, vocab)?;
    Ok(compile_pattern(&pattern, vocab)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub request_chars: usize,
    pub parse_ms: f64,
    pub build_ms: f64,
    pub total_ms: f64,
    pub operator_nodes: usize,
    /// Earley parses run on this thread during the probe; zero for the online path.
    pub earley_calls: u64,
}

/// Times `parse_request` + `build_operators` for one request.
pub fn instantiation_cost_probe(
    doc: &RequestDoc,
    factory: &StructureFactory,
    vocab: &Vocabulary,
) -> Result<ProbeRecord, FrontendError> {
    let earley_before = earley::thread_invocations();
    let t0 = Instant::now();
    let fmt = doc.parse(factory)?;
    let t1 = Instant::now();
    let op = build_operators(&fmt, factory, vocab)?;
    let t2 = Instant::now();
    Ok(ProbeRecord {
        request_chars: doc.format.len(),
        parse_ms: (t1 - t0).as_secs_f64() * 1e3,
        build_ms: (t2 - t1).as_secs_f64() * 1e3,
        total_ms: (t2 - t0).as_secs_f64() * 1e3,
        operator_nodes: op.node_count(),
        earley_calls: earley::thread_invocations() - earley_before,
    })
}
