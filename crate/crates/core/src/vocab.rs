//! Token table, byte-level character classes, and token-set classification.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("vocabulary is empty")]
    Empty,
    #[error("duplicate token {token:?} at ids {first} and {second}")]
    Duplicate {
        token: String,
        first: TokenId,
        second: TokenId,
    },
    #[error("missing eos designation")]
    MissingEos,
    #[error("eos token {0:?} is not in the vocabulary")]
    UnknownEos(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Sorted, deduplicated set of token ids.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSet(Vec<TokenId>);

impl TokenSet {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn singleton(id: TokenId) -> Self {
        Self(vec![id])
    }

    pub fn from_sorted_unchecked(ids: Vec<TokenId>) -> Self {
        debug_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &TokenSet) -> TokenSet {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        TokenSet(out)
    }

    pub fn intersection(&self, other: &TokenSet) -> TokenSet {
        TokenSet(self.0.iter().copied().filter(|id| other.contains(*id)).collect())
    }

    pub fn difference(&self, other: &TokenSet) -> TokenSet {
        TokenSet(self.0.iter().copied().filter(|id| !other.contains(*id)).collect())
    }

    pub fn is_disjoint(&self, other: &TokenSet) -> bool {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }

    pub fn is_subset(&self, other: &TokenSet) -> bool {
        self.0.iter().all(|id| other.contains(*id))
    }

    /// All ids in `0..size` not in this set.
    pub fn complement(&self, size: usize) -> TokenSet {
        TokenSet((0..size as TokenId).filter(|id| !self.contains(*id)).collect())
    }
}

impl FromIterator<TokenId> for TokenSet {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        let mut v: Vec<TokenId> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        TokenSet(v)
    }
}

impl fmt::Debug for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.0.iter()).finish()
    }
}

/// Byte predicate used by regex classes. Predicates apply to ASCII; non-ASCII
/// bytes only satisfy `Any` and explicit literal sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CharClass {
    Digit,
    Word,
    Whitespace,
    Set(BTreeSet<u8>),
    NotSet(BTreeSet<u8>),
    Any,
}

impl CharClass {
    pub fn matches(&self, b: u8) -> bool {
        match self {
            CharClass::Digit => b.is_ascii_digit(),
            CharClass::Word => b.is_ascii_alphanumeric() || b == b'_',
            CharClass::Whitespace => matches!(b, b' ' | b'\t' | b'\n' | b'\r'),
            CharClass::Set(m) => m.contains(&b),
            CharClass::NotSet(m) => b.is_ascii() && !m.contains(&b),
            CharClass::Any => true,
        }
    }

    /// True for classes that the author expressed by exclusion.
    pub fn is_negative(&self) -> bool {
        matches!(self, CharClass::NotSet(_) | CharClass::Any)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    eos_id: TokenId,
    index: HashMap<Vec<u8>, TokenId>,
    max_token_len: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<Vec<u8>>, eos: &[u8]) -> Result<Self, VocabError> {
        if tokens.is_empty() {
            return Err(VocabError::Empty);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if let Some(first) = index.insert(tok.clone(), id as TokenId) {
                return Err(VocabError::Duplicate {
                    token: String::from_utf8_lossy(tok).into_owned(),
                    first,
                    second: id as TokenId,
                });
            }
        }
        let eos_id = *index
            .get(eos)
            .ok_or_else(|| VocabError::UnknownEos(String::from_utf8_lossy(eos).into_owned()))?;
        let max_token_len = tokens.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self {
            tokens,
            eos_id,
            index,
            max_token_len,
        })
    }

    /// Convenience constructor from string tokens.
    pub fn from_strs(tokens: &[&str], eos: &str) -> Result<Self, VocabError> {
        Self::new(
            tokens.iter().map(|t| t.as_bytes().to_vec()).collect(),
            eos.as_bytes(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn token(&self, id: TokenId) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, token: &[u8]) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn all_ids(&self) -> TokenSet {
        TokenSet::from_sorted_unchecked((0..self.len() as TokenId).collect())
    }

    /// Ids of non-empty, non-eos tokens whose every byte satisfies `cls`.
    pub fn classify(&self, cls: &CharClass) -> TokenSet {
        let ids = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(id, tok)| {
                *id as TokenId != self.eos_id && !tok.is_empty() && tok.iter().all(|b| cls.matches(*b))
            })
            .map(|(id, _)| id as TokenId)
            .collect();
        TokenSet::from_sorted_unchecked(ids)
    }

    /// Longest-exact-token-first segmentation of `text`. The eos token is never
    /// produced. Returns the byte offset of the first unresolvable position on failure.
    pub fn tokenize(&self, text: &[u8]) -> Result<Vec<TokenId>, usize> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let longest = self.max_token_len.min(text.len() - pos);
            let hit = (1..=longest).rev().find_map(|n| {
                self.id_of(&text[pos..pos + n])
                    .filter(|id| *id != self.eos_id)
                    .map(|id| (id, n))
            });
            match hit {
                Some((id, n)) => {
                    out.push(id);
                    pos += n;
                }
                None => return Err(pos),
            }
        }
        Ok(out)
    }

    /// Concatenated bytes of `ids`, skipping eos.
    pub fn detokenize(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter()
            .filter(|id| **id != self.eos_id)
            .filter_map(|id| self.token(*id))
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut lines: Vec<&str> = text.split('\n').collect();
        if text.ends_with('\n') {
            lines.pop();
        }
        let mut it = lines.into_iter().enumerate();
        let (_, header) = it.next().ok_or(VocabError::MissingEos)?;
        let eos_src = header.strip_prefix("#eos ").ok_or(VocabError::MissingEos)?;
        let eos = unescape(eos_src).map_err(|msg| VocabError::Syntax { line: 1, msg })?;
        let mut tokens = Vec::new();
        for (i, line) in it {
            tokens.push(unescape(line).map_err(|msg| VocabError::Syntax { line: i + 1, msg })?);
        }
        Self::new(tokens, &eos)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|e| VocabError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical file form; `parse(to_file_string())` reproduces `self`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        out.push_str("#eos ");
        out.push_str(&escape(&self.tokens[self.eos_id as usize]));
        out.push('\n');
        for tok in &self.tokens {
            out.push_str(&escape(tok));
            out.push('\n');
        }
        out
    }
}

pub fn escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\\' => s.push_str("\\\\"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\x{b:02x}")),
        }
    }
    s
}

pub fn unescape(s: &str) -> Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'\\' {
            out.push(bytes[i]);
            i += 1;
            continue;
        }
        match bytes.get(i + 1) {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'r') => out.push(b'\r'),
            Some(b'\\') => out.push(b'\\'),
            Some(b'x') => {
                let hex = s
                    .get(i + 2..i + 4)
                    .ok_or_else(|| format!("truncated \\x escape at column {}", i + 1))?;
                let v = u8::from_str_radix(hex, 16)
                    .map_err(|_| format!("bad \\x escape {hex:?} at column {}", i + 1))?;
                out.push(v);
                i += 4;
                continue;
            }
            other => {
                return Err(format!(
                    "unknown escape \\{} at column {}",
                    other.map(|b| *b as char).unwrap_or(' '),
                    i + 1
                ))
            }
        }
        i += 2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vocabulary {
        Vocabulary::from_strs(&["0", "1", ".", "a", "<eos>"], "<eos>").unwrap()
    }

    #[test]
    fn builds_small_vocab() {
        let v = small();
        assert_eq!(v.len(), 5);
        assert_eq!(v.eos_id(), 4);
    }

    #[test]
    fn rejects_duplicates_and_empty() {
        assert!(matches!(
            Vocabulary::from_strs(&["a", "a"], "a"),
            Err(VocabError::Duplicate { first: 0, second: 1, .. })
        ));
        assert_eq!(Vocabulary::from_strs(&[], "x"), Err(VocabError::Empty));
        assert!(matches!(Vocabulary::from_strs(&["a"], "<eos>"), Err(VocabError::UnknownEos(_))));
        assert_eq!(Vocabulary::parse("a\nb\n"), Err(VocabError::MissingEos));
    }

    #[test]
    fn classify_basic() {
        let v = small();
        assert_eq!(v.classify(&CharClass::Digit).ids(), &[0, 1]);
        assert_eq!(v.classify(&CharClass::Set([b'.'].into())).ids(), &[2]);
        assert_eq!(v.classify(&CharClass::Any).ids(), &[0, 1, 2, 3]);
    }

    #[test]
    fn whole_token_classification() {
        let v = Vocabulary::from_strs(&["3", "3.", "45", "", "<eos>"], "<eos>").unwrap();
        assert_eq!(v.classify(&CharClass::Digit).ids(), &[0, 2]);
    }

    #[test]
    fn non_ascii_only_matches_any_and_literal_sets() {
        let v = Vocabulary::new(vec![vec![0xc3, 0xa9], b"e".to_vec(), b"$".to_vec()], b"$").unwrap();
        assert!(v.classify(&CharClass::NotSet([b'x'].into())).ids() == [1]);
        assert_eq!(v.classify(&CharClass::Any).ids(), &[0, 1]);
        assert_eq!(v.classify(&CharClass::Set([0xc3, 0xa9].into())).ids(), &[0]);
    }

    #[test]
    fn tokenize_prefers_longest() {
        let v = Vocabulary::from_strs(&["<", "h", "1", ">", "<h1>", "<eos>"], "<eos>").unwrap();
        assert_eq!(v.tokenize(b"<h1>").unwrap(), vec![4]);
        assert_eq!(v.tokenize(b"h<h").unwrap(), vec![1, 0, 1]);
        assert_eq!(v.tokenize(b"hx"), Err(1));
        assert_eq!(v.tokenize(b"<eos>"), Err(1));
    }

    #[test]
    fn file_format_round_trip() {
        let text = "#eos <eos>\n0\n\\n\n\\t\n\\\\\n\\xff\n<eos>\n";
        let v = Vocabulary::parse(text).unwrap();
        assert_eq!(v.token(1), Some(&b"\n"[..]));
        assert_eq!(v.token(4), Some(&[0xffu8][..]));
        assert_eq!(v.eos_id(), 5);
        assert_eq!(v.to_file_string(), text);
    }

    #[test]
    fn bad_escape_reports_line() {
        let err = Vocabulary::parse("#eos e\ne\n\\q\n").unwrap_err();
        assert!(matches!(err, VocabError::Syntax { line: 3, .. }));
    }

    #[test]
    fn set_ops() {
        let a: TokenSet = [3, 1, 2].into_iter().collect();
        let b: TokenSet = [2, 5].into_iter().collect();
        assert_eq!(a.union(&b).ids(), &[1, 2, 3, 5]);
        assert_eq!(a.intersection(&b).ids(), &[2]);
        assert_eq!(a.difference(&b).ids(), &[1, 3]);
        assert!(!a.is_disjoint(&b));
        assert_eq!(b.complement(4).ids(), &[0, 1, 3]);
    }
}
