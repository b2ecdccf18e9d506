//! Parser for the supported regex subset and lowering to token-level patterns.
//!
//! Supported: literals, escapes, `\d \w \s` (and their negations), `[...]`,
//! `[^...]`, `.`, `|`, `( )`, `*`, `+`, `?`. Everything else (bounded
//! repetition, anchors, backreferences, lookaround, non-capturing group
//! syntax) is rejected with its byte position.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::pattern::{CompileError, Pattern};
use crate::vocab::{CharClass, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegexError {
    #[error("unsupported construct {construct:?} at position {pos}")]
    Unsupported { construct: String, pos: usize },
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RegexAst {
    Literal(Vec<u8>),
    Class(CharClass),
    Concat(Vec<RegexAst>),
    Alternation(Box<RegexAst>, Box<RegexAst>),
    Star(Box<RegexAst>),
    Plus(Box<RegexAst>),
    Optional(Box<RegexAst>),
    Group(Box<RegexAst>),
}

pub fn parse_regex(pattern: &str) -> Result<RegexAst, RegexError> {
    let mut p = Parser {
        src: pattern.as_bytes(),
        pos: 0,
    };
    let ast = p.alternation()?;
    match p.peek() {
        None => Ok(ast),
        Some(b')') => Err(p.syntax("unbalanced ')'")),
        Some(_) => Err(p.syntax("unexpected character")),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn syntax(&self, msg: &str) -> RegexError {
        RegexError::Syntax {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn unsupported(&self, construct: &str) -> RegexError {
        RegexError::Unsupported {
            construct: construct.to_string(),
            pos: self.pos,
        }
    }

    fn alternation(&mut self) -> Result<RegexAst, RegexError> {
        let mut left = self.concat()?;
        while self.peek() == Some(b'|') {
            self.pos += 1;
            let right = self.concat()?;
            left = RegexAst::Alternation(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn concat(&mut self) -> Result<RegexAst, RegexError> {
        let mut items = Vec::new();
        while let Some(c) = self.peek() {
            if c == b'|' || c == b')' {
                break;
            }
            items.push(self.postfix()?);
        }
        match items.len() {
            0 => Err(self.syntax("empty expression")),
            1 => Ok(items.pop().unwrap()),
            _ => Ok(RegexAst::Concat(items)),
        }
    }

    fn postfix(&mut self) -> Result<RegexAst, RegexError> {
        let mut atom = self.atom()?;
        loop {
            atom = match self.peek() {
                Some(b'*') => RegexAst::Star(Box::new(atom)),
                Some(b'+') => RegexAst::Plus(Box::new(atom)),
                Some(b'?') => RegexAst::Optional(Box::new(atom)),
                Some(b'{') => return Err(self.unsupported("bounded repetition {m,n}")),
                _ => return Ok(atom),
            };
            self.pos += 1;
            if matches!(self.peek(), Some(b'?') | Some(b'+')) && !matches!(atom, RegexAst::Optional(_)) {
                return Err(self.unsupported("lazy or possessive quantifier"));
            }
        }
    }

    fn atom(&mut self) -> Result<RegexAst, RegexError> {
        let c = self.peek().ok_or_else(|| self.syntax("unexpected end of pattern"))?;
        match c {
            b'(' => {
                if self.src.get(self.pos + 1) == Some(&b'?') {
                    return Err(self.unsupported("(? group syntax or lookaround"));
                }
                self.pos += 1;
                let inner = self.alternation()?;
                if self.peek() != Some(b')') {
                    return Err(self.syntax("missing ')'"));
                }
                self.pos += 1;
                Ok(RegexAst::Group(Box::new(inner)))
            }
            b'[' => self.bracket(),
            b'.' => {
                self.pos += 1;
                Ok(RegexAst::Class(CharClass::Any))
            }
            b'^' | b'$' => Err(self.unsupported("anchor")),
            b'*' | b'+' | b'?' => Err(self.syntax("repetition operator without operand")),
            b'{' => Err(self.unsupported("bounded repetition {m,n}")),
            b'\\' => match self.escape()? {
                Escaped::Byte(b) => Ok(RegexAst::Literal(vec![b])),
                Escaped::Class(c) => Ok(RegexAst::Class(c)),
            },
            _ => {
                self.pos += 1;
                Ok(RegexAst::Literal(vec![c]))
            }
        }
    }

    fn escape(&mut self) -> Result<Escaped, RegexError> {
        let start = self.pos;
        self.pos += 1;
        let c = self.peek().ok_or_else(|| self.syntax("dangling backslash"))?;
        self.pos += 1;
        Ok(match c {
            b'd' => Escaped::Class(CharClass::Digit),
            b'w' => Escaped::Class(CharClass::Word),
            b's' => Escaped::Class(CharClass::Whitespace),
            b'D' => Escaped::Class(CharClass::NotSet(members(&CharClass::Digit))),
            b'W' => Escaped::Class(CharClass::NotSet(members(&CharClass::Word))),
            b'S' => Escaped::Class(CharClass::NotSet(members(&CharClass::Whitespace))),
            b'n' => Escaped::Byte(b'\n'),
            b't' => Escaped::Byte(b'\t'),
            b'r' => Escaped::Byte(b'\r'),
            b'x' => {
                let hex = self
                    .src
                    .get(self.pos..self.pos + 2)
                    .and_then(|h| std::str::from_utf8(h).ok())
                    .and_then(|h| u8::from_str_radix(h, 16).ok())
                    .ok_or_else(|| self.syntax("bad \\x escape"))?;
                self.pos += 2;
                Escaped::Byte(hex)
            }
            b'1'..=b'9' => {
                self.pos = start;
                return Err(self.unsupported("backreference"));
            }
            b'b' | b'B' | b'A' | b'z' | b'Z' => {
                self.pos = start;
                return Err(self.unsupported("anchor"));
            }
            c if c.is_ascii_punctuation() => Escaped::Byte(c),
            _ => {
                self.pos = start;
                return Err(self.unsupported("escape sequence"));
            }
        })
    }

    fn bracket(&mut self) -> Result<RegexAst, RegexError> {
        self.pos += 1;
        let negated = self.peek() == Some(b'^');
        if negated {
            self.pos += 1;
        }
        let mut set = BTreeSet::new();
        let mut first = true;
        loop {
            let c = self.peek().ok_or_else(|| self.syntax("unterminated character set"))?;
            if c == b']' && !first {
                self.pos += 1;
                break;
            }
            first = false;
            let lo = if c == b'\\' {
                match self.escape()? {
                    Escaped::Byte(b) => b,
                    Escaped::Class(cls) => {
                        set.extend(members(&cls));
                        continue;
                    }
                }
            } else {
                self.pos += 1;
                c
            };
            if self.peek() == Some(b'-') && self.src.get(self.pos + 1).is_some_and(|n| *n != b']') {
                self.pos += 1;
                let hi = match self.peek() {
                    Some(b'\\') => match self.escape()? {
                        Escaped::Byte(b) => b,
                        Escaped::Class(_) => return Err(self.syntax("class cannot end a range")),
                    },
                    Some(h) => {
                        self.pos += 1;
                        h
                    }
                    None => return Err(self.syntax("unterminated range")),
                };
                if hi < lo {
                    return Err(self.syntax("reversed range"));
                }
                set.extend(lo..=hi);
            } else {
                set.insert(lo);
            }
        }
        Ok(RegexAst::Class(if negated {
            CharClass::NotSet(set)
        } else {
            CharClass::Set(set)
        }))
    }
}

enum Escaped {
    Byte(u8),
    Class(CharClass),
}

// ASCII members of a fixed class.
fn members(cls: &CharClass) -> BTreeSet<u8> {
    (0u8..128).filter(|b| cls.matches(*b)).collect()
}

impl fmt::Display for RegexAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegexAst::Literal(bytes) => {
                for &b in bytes {
                    write_byte(f, b)?;
                }
                Ok(())
            }
            RegexAst::Class(c) => write_class(f, c),
            RegexAst::Concat(items) => items.iter().try_for_each(|i| write!(f, "{i}")),
            RegexAst::Alternation(a, b) => write!(f, "{a}|{b}"),
            RegexAst::Star(a) => write_postfix(f, a, '*'),
            RegexAst::Plus(a) => write_postfix(f, a, '+'),
            RegexAst::Optional(a) => write_postfix(f, a, '?'),
            RegexAst::Group(a) => write!(f, "({a})"),
        }
    }
}

fn write_postfix(f: &mut fmt::Formatter<'_>, inner: &RegexAst, op: char) -> fmt::Result {
    match inner {
        RegexAst::Concat(_) | RegexAst::Alternation(..) => write!(f, "({inner}){op}"),
        RegexAst::Literal(b) if b.len() > 1 => write!(f, "({inner}){op}"),
        _ => write!(f, "{inner}{op}"),
    }
}

fn write_byte(f: &mut fmt::Formatter<'_>, b: u8) -> fmt::Result {
    match b {
        b'\n' => f.write_str("\\n"),
        b'\t' => f.write_str("\\t"),
        b'\r' => f.write_str("\\r"),
        b'.' | b'\\' | b'|' | b'(' | b')' | b'[' | b']' | b'*' | b'+' | b'?' | b'{' | b'}' | b'^' | b'$' => {
            write!(f, "\\{}", b as char)
        }
        0x20..=0x7e => write!(f, "{}", b as char),
        _ => write!(f, "\\x{b:02x}"),
    }
}

fn write_class(f: &mut fmt::Formatter<'_>, c: &CharClass) -> fmt::Result {
    match c {
        CharClass::Digit => f.write_str("\\d"),
        CharClass::Word => f.write_str("\\w"),
        CharClass::Whitespace => f.write_str("\\s"),
        CharClass::Any => f.write_str("."),
        CharClass::Set(m) | CharClass::NotSet(m) => {
            f.write_str("[")?;
            if matches!(c, CharClass::NotSet(_)) {
                f.write_str("^")?;
            }
            for &b in m {
                match b {
                    b']' | b'\\' | b'^' | b'-' => write!(f, "\\{}", b as char)?,
                    _ => write_byte(f, b)?,
                }
            }
            f.write_str("]")
        }
    }
}

/// Lowers a regex to a token-level pattern over `vocab` using whole-token
/// classification for classes and per-character tokens for literals.
pub fn lower(ast: &RegexAst, vocab: &Vocabulary) -> Result<Arc<Pattern>, CompileError> {
    let label = ast.to_string();
    Ok(match ast {
        RegexAst::Literal(bytes) => {
            let ids = vocab.tokenize(bytes).map_err(|_| CompileError::Unresolvable {
                text: String::from_utf8_lossy(bytes).into_owned(),
            })?;
            Pattern::lit(ids, label)
        }
        RegexAst::Class(c) => {
            let set = vocab.classify(c);
            if set.is_empty() {
                return Err(CompileError::EmptyClass { subexpr: label });
            }
            Pattern::class(set, c.is_negative(), label)
        }
        RegexAst::Concat(items) => {
            let parts = items.iter().map(|i| lower(i, vocab)).collect::<Result<Vec<_>, _>>()?;
            Pattern::seq(parts, label)
        }
        RegexAst::Alternation(a, b) => Pattern::alt(lower(a, vocab)?, lower(b, vocab)?, label),
        RegexAst::Star(a) => Pattern::star(lower(a, vocab)?),
        RegexAst::Plus(a) => Pattern::plus(lower(a, vocab)?),
        RegexAst::Optional(a) => Pattern::opt(lower(a, vocab)?),
        RegexAst::Group(a) => lower(a, vocab)?,
    })
}
