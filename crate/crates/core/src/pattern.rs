//! Token-level patterns and their compilation into operator trees.
//!
//! Both regex snippets and instantiated templates lower to [`Pattern`], so a
//! structure written either way compiles to the same tree.
//!
//! Compilation walks a scope left to right with single-token lookahead:
//!
//! * a literal becomes a `Write`, a class a `Wait` on the class tokens;
//! * repetition of a single-token subpattern is never a separate operator:
//!   its tokens are carried forward as the stay set of whichever wait
//!   consumes the next token ("absorbed");
//! * any other `*`, `?`, or `|` becomes an `IfElse` whose condition consumes
//!   the deciding token, and the compiler continues with the derivative of
//!   the remaining pattern with respect to that token set.
//!
//! Loops exit on the first token of what follows them. When the continue and
//! exit sets overlap the pattern is rejected instead of silently matching a
//! different language.

use std::collections::VecDeque;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::operators::{Condition, DoWhileOp, IfElseOp, Operator, StaySet, WaitOp};
use crate::vocab::{TokenId, TokenSet, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompileError {
    #[error("FIRST/FOLLOW overlap in `{subexpr}`: tokens {tokens:?} could both continue it and start `{other}`")]
    Overlap {
        subexpr: String,
        other: String,
        tokens: TokenSet,
    },
    #[error("`{subexpr}` cannot be compiled with one-token lookahead: {reason}")]
    Undecidable { subexpr: String, reason: String },
    #[error("text {text:?} cannot be tokenized with this vocabulary")]
    Unresolvable { text: String },
    #[error("class `{subexpr}` matches no vocabulary token")]
    EmptyClass { subexpr: String },
}

#[derive(Debug, Clone)]
pub enum PatternKind {
    Lit(Vec<TokenId>),
    /// One token from `set`; `negative` marks classes written by exclusion.
    Class { set: TokenSet, negative: bool },
    Seq(Vec<Arc<Pattern>>),
    Alt(Arc<Pattern>, Arc<Pattern>),
    Star(Arc<Pattern>),
    Plus(Arc<Pattern>),
    Opt(Arc<Pattern>),
}

#[derive(Debug, Clone)]
pub struct Pattern {
    pub kind: PatternKind,
    pub label: String,
    first: TokenSet,
    nullable: bool,
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        match (&self.kind, &other.kind) {
            (PatternKind::Lit(a), PatternKind::Lit(b)) => a == b,
            (PatternKind::Class { set: a, negative: na }, PatternKind::Class { set: b, negative: nb }) => {
                a == b && na == nb
            }
            (PatternKind::Seq(a), PatternKind::Seq(b)) => a == b,
            (PatternKind::Alt(a1, a2), PatternKind::Alt(b1, b2)) => a1 == b1 && a2 == b2,
            (PatternKind::Star(a), PatternKind::Star(b))
            | (PatternKind::Plus(a), PatternKind::Plus(b))
            | (PatternKind::Opt(a), PatternKind::Opt(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Pattern {}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

fn wrap(label: &str) -> String {
    let simple = label.chars().count() == 1
        || (label.starts_with('(') && label.ends_with(')'))
        || (label.starts_with('[') && label.ends_with(']'))
        || (label.starts_with('"') && label.ends_with('"'))
        || (label.starts_with('\\') && label.len() == 2);
    if simple {
        label.to_string()
    } else {
        format!("({label})")
    }
}

impl Pattern {
    pub fn lit(ids: Vec<TokenId>, label: impl Into<String>) -> Arc<Self> {
        assert!(!ids.is_empty(), "empty literal");
        Arc::new(Pattern {
            first: TokenSet::singleton(ids[0]),
            nullable: false,
            kind: PatternKind::Lit(ids),
            label: label.into(),
        })
    }

    pub fn class(set: TokenSet, negative: bool, label: impl Into<String>) -> Arc<Self> {
        Arc::new(Pattern {
            first: set.clone(),
            nullable: false,
            kind: PatternKind::Class { set, negative },
            label: label.into(),
        })
    }

    pub fn seq(parts: Vec<Arc<Pattern>>, label: impl Into<String>) -> Arc<Self> {
        let (first, nullable) = first_of_iter(parts.iter());
        Arc::new(Pattern {
            first,
            nullable,
            kind: PatternKind::Seq(parts),
            label: label.into(),
        })
    }

    pub fn alt(a: Arc<Pattern>, b: Arc<Pattern>, label: impl Into<String>) -> Arc<Self> {
        Arc::new(Pattern {
            first: a.first.union(&b.first),
            nullable: a.nullable || b.nullable,
            kind: PatternKind::Alt(a, b),
            label: label.into(),
        })
    }

    pub fn star(inner: Arc<Pattern>) -> Arc<Self> {
        Arc::new(Pattern {
            first: inner.first.clone(),
            nullable: true,
            label: format!("{}*", wrap(&inner.label)),
            kind: PatternKind::Star(inner),
        })
    }

    pub fn plus(inner: Arc<Pattern>) -> Arc<Self> {
        Arc::new(Pattern {
            first: inner.first.clone(),
            nullable: inner.nullable,
            label: format!("{}+", wrap(&inner.label)),
            kind: PatternKind::Plus(inner),
        })
    }

    pub fn opt(inner: Arc<Pattern>) -> Arc<Self> {
        Arc::new(Pattern {
            first: inner.first.clone(),
            nullable: true,
            label: format!("{}?", wrap(&inner.label)),
            kind: PatternKind::Opt(inner),
        })
    }

    /// Tokens that can begin a non-empty match.
    pub fn first(&self) -> &TokenSet {
        &self.first
    }

    pub fn nullable(&self) -> bool {
        self.nullable
    }

    /// Token set when every string this pattern matches is exactly one token.
    fn single_token(&self) -> Option<(TokenSet, bool)> {
        match &self.kind {
            PatternKind::Lit(ids) if ids.len() == 1 => Some((TokenSet::singleton(ids[0]), false)),
            PatternKind::Class { set, negative } => Some((set.clone(), *negative)),
            PatternKind::Alt(a, b) => {
                let (sa, na) = a.single_token()?;
                let (sb, nb) = b.single_token()?;
                Some((sa.union(&sb), na || nb))
            }
            PatternKind::Seq(parts) if parts.len() == 1 => parts[0].single_token(),
            _ => None,
        }
    }
}

fn first_of_iter<'a>(items: impl Iterator<Item = &'a Arc<Pattern>>) -> (TokenSet, bool) {
    let mut first = TokenSet::new();
    for p in items {
        first = first.union(&p.first);
        if !p.nullable {
            return (first, false);
        }
    }
    (first, true)
}

/// Remaining items of a scope: a small owned prefix in front of a borrowed tail.
#[derive(Clone)]
struct Cursor<'a> {
    prefix: VecDeque<Arc<Pattern>>,
    tail: &'a [Arc<Pattern>],
}

impl<'a> Cursor<'a> {
    fn new(tail: &'a [Arc<Pattern>]) -> Self {
        Cursor {
            prefix: VecDeque::new(),
            tail,
        }
    }

    fn pop(&mut self) -> Option<Arc<Pattern>> {
        if let Some(p) = self.prefix.pop_front() {
            return Some(p);
        }
        let (head, rest) = self.tail.split_first()?;
        self.tail = rest;
        Some(Arc::clone(head))
    }

    fn push_front_all(&mut self, items: impl DoubleEndedIterator<Item = Arc<Pattern>>) {
        for p in items.rev() {
            self.prefix.push_front(p);
        }
    }

    fn items(&self) -> impl Iterator<Item = &Arc<Pattern>> {
        self.prefix.iter().chain(self.tail.iter())
    }

    /// FIRST of the remainder, and whether the remainder can be empty.
    fn first(&self) -> (TokenSet, bool) {
        first_of_iter(self.items())
    }

    fn same_as(&self, other: &Cursor<'a>) -> bool {
        self.prefix == other.prefix
            && self.tail.len() == other.tail.len()
            && std::ptr::eq(self.tail.as_ptr(), other.tail.as_ptr())
    }

    fn describe(&self) -> String {
        let parts: Vec<&str> = self.items().map(|p| p.label.as_str()).take(4).collect();
        if parts.is_empty() {
            "<end>".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Tokens carried into the next consuming wait as its stay set.
#[derive(Clone, Default)]
struct Absorb {
    set: TokenSet,
    negative: bool,
    label: String,
}

impl Absorb {
    fn add(&mut self, set: &TokenSet, negative: bool, label: &str) {
        self.set = self.set.union(set);
        self.negative |= negative;
        if self.label.is_empty() {
            self.label = label.to_string();
        } else {
            self.label = format!("{} {label}", self.label);
        }
    }

    fn same_tokens(&self, other: &Absorb) -> bool {
        self.set == other.set && self.negative == other.negative
    }
}

struct Compiler {
    vocab_size: usize,
}

type Scope = (Vec<Operator>, Absorb);

impl Compiler {
    fn stay(&self, absorb: &Absorb, triggers: &TokenSet) -> StaySet {
        if absorb.negative {
            StaySet::Deny(absorb.set.union(triggers).complement(self.vocab_size))
        } else {
            StaySet::Allow(absorb.set.clone())
        }
    }

    fn check_disjoint(&self, absorb: &Absorb, triggers: &TokenSet, at: &str) -> Result<(), CompileError> {
        if absorb.set.is_disjoint(triggers) {
            Ok(())
        } else {
            Err(CompileError::Overlap {
                subexpr: absorb.label.clone(),
                other: at.to_string(),
                tokens: absorb.set.intersection(triggers),
            })
        }
    }

    fn wait(&self, absorb: &Absorb, waits: TokenSet) -> Operator {
        Operator::Wait(WaitOp {
            stay: self.stay(absorb, &waits),
            waits,
            body: None,
        })
    }

    fn condition(&self, absorb: &Absorb, true_waits: TokenSet, false_waits: TokenSet) -> Condition {
        Condition {
            stay: self.stay(absorb, &true_waits.union(&false_waits)),
            true_waits,
            false_waits,
        }
    }

    /// Compiles the remainder of a scope. `follow` is FIRST of whatever
    /// comes after the scope; the returned absorb set is still pending.
    fn scope(&self, mut cur: Cursor<'_>, follow: &TokenSet, mut absorb: Absorb) -> Result<Scope, CompileError> {
        let mut ops = Vec::new();
        while let Some(item) = cur.pop() {
            match &item.kind {
                PatternKind::Seq(parts) => cur.push_front_all(parts.iter().cloned()),
                PatternKind::Lit(ids) => {
                    let head = TokenSet::singleton(ids[0]);
                    self.check_disjoint(&absorb, &head, &item.label)?;
                    if absorb.set.is_empty() {
                        ops.push(Operator::Write(ids.clone()));
                    } else {
                        ops.push(self.wait(&absorb, head));
                        if ids.len() > 1 {
                            ops.push(Operator::Write(ids[1..].to_vec()));
                        }
                    }
                    absorb = Absorb::default();
                }
                PatternKind::Class { set, .. } => {
                    self.check_disjoint(&absorb, set, &item.label)?;
                    ops.push(self.wait(&absorb, set.clone()));
                    absorb = Absorb::default();
                }
                PatternKind::Plus(inner) => match inner.single_token() {
                    Some((set, negative)) => {
                        self.check_disjoint(&absorb, &set, &item.label)?;
                        ops.push(self.wait(&absorb, set.clone()));
                        absorb = Absorb::default();
                        absorb.add(&set, negative, &item.label);
                    }
                    None => cur.push_front_all([Arc::clone(inner), Pattern::star(Arc::clone(inner))].into_iter()),
                },
                PatternKind::Star(inner) => match inner.single_token() {
                    // X*Y* is (X|Y)* only when one set contains the other
                    Some((set, negative))
                        if absorb.set.is_empty() || set.is_subset(&absorb.set) || absorb.set.is_subset(&set) =>
                    {
                        absorb.add(&set, negative, &item.label)
                    }
                    _ => {
                        let (op, next) = self.star(&item, inner, cur, follow, &absorb)?;
                        ops.push(op);
                        cur = next;
                        absorb = Absorb::default();
                    }
                },
                PatternKind::Opt(inner) => {
                    let (op, next) = self.optional(&item, inner, cur, follow, &absorb)?;
                    ops.push(op);
                    cur = next;
                    absorb = Absorb::default();
                }
                PatternKind::Alt(a, b) => match item.single_token() {
                    Some((set, _)) => {
                        self.check_disjoint(&absorb, &set, &item.label)?;
                        ops.push(self.wait(&absorb, set));
                        absorb = Absorb::default();
                    }
                    None => {
                        let (op, next, pending) = self.alternation(&item, a, b, cur, follow, &absorb)?;
                        ops.push(op);
                        cur = next;
                        absorb = pending;
                    }
                },
            }
        }
        Ok((ops, absorb))
    }

    /// Exit set of a decision point and the continuation after consuming it.
    fn exit<'a>(&self, item: &Pattern, cur: &Cursor<'a>, follow: &TokenSet) -> Result<TokenSet, CompileError> {
        let (exit, reaches_end) = cur.first();
        if reaches_end && !follow.is_empty() {
            return Err(CompileError::Undecidable {
                subexpr: item.label.clone(),
                reason: "its exit token would belong to the enclosing repetition".into(),
            });
        }
        Ok(exit)
    }

    fn decision_sets(
        &self,
        item: &Pattern,
        enter: &TokenSet,
        exit: &TokenSet,
        other: &str,
        absorb: &Absorb,
    ) -> Result<(), CompileError> {
        if !enter.is_disjoint(exit) {
            return Err(CompileError::Overlap {
                subexpr: item.label.clone(),
                other: other.to_string(),
                tokens: enter.intersection(exit),
            });
        }
        self.check_disjoint(absorb, &enter.union(exit), &item.label)
    }

    fn nonempty_inner(&self, item: &Pattern, inner: &Pattern) -> Result<(), CompileError> {
        if inner.nullable {
            Err(CompileError::Undecidable {
                subexpr: item.label.clone(),
                reason: format!("`{}` can match the empty string", inner.label),
            })
        } else {
            Ok(())
        }
    }

    fn star<'a>(
        &self,
        item: &Pattern,
        inner: &Arc<Pattern>,
        cur: Cursor<'a>,
        follow: &TokenSet,
        absorb: &Absorb,
    ) -> Result<(Operator, Cursor<'a>), CompileError> {
        self.nonempty_inner(item, inner)?;
        let enter = inner.first().clone();
        let exit = self.exit(item, &cur, follow)?;
        self.decision_sets(item, &enter, &exit, &cur.describe(), absorb)?;

        let inner_items = [Arc::clone(inner)];
        let body_start = derive(Cursor::new(&inner_items), &enter, item)?;
        let loop_follow = enter.union(&exit);
        let (body, pending) = self.scope(body_start, &loop_follow, Absorb::default())?;
        self.check_disjoint(&pending, &loop_follow, &item.label)?;

        let else_body = if body.is_empty() {
            // Body finishes right after its first token: the loop is a plain
            // absorption of the entry tokens until an exit token.
            let mut stay = pending.clone();
            stay.add(&enter, false, &inner.label);
            self.wait(&stay, exit.clone())
        } else {
            Operator::DoWhile(DoWhileOp {
                body: Box::new(into_op(body)),
                condition: self.condition(&pending, enter.clone(), exit.clone()),
            })
        };
        let op = Operator::IfElse(IfElseOp {
            condition: self.condition(absorb, exit.clone(), enter),
            if_body: None,
            else_body: Some(Box::new(else_body)),
        });
        Ok((op, derive(cur, &exit, item)?))
    }

    fn optional<'a>(
        &self,
        item: &Pattern,
        inner: &Arc<Pattern>,
        cur: Cursor<'a>,
        follow: &TokenSet,
        absorb: &Absorb,
    ) -> Result<(Operator, Cursor<'a>), CompileError> {
        self.nonempty_inner(item, inner)?;
        let enter = inner.first().clone();
        let exit = self.exit(item, &cur, follow)?;
        self.decision_sets(item, &enter, &exit, &cur.describe(), absorb)?;

        let inner_items = [Arc::clone(inner)];
        let start = derive(Cursor::new(&inner_items), &enter, item)?;
        let (mut body, pending) = self.scope(start, &exit, Absorb::default())?;
        self.check_disjoint(&pending, &exit, &item.label)?;
        body.push(self.wait(&pending, exit.clone()));
        let op = Operator::IfElse(IfElseOp {
            condition: self.condition(absorb, exit.clone(), enter),
            if_body: None,
            else_body: Some(Box::new(into_op(body))),
        });
        Ok((op, derive(cur, &exit, item)?))
    }

    fn alternation<'a>(
        &self,
        item: &Pattern,
        a: &Arc<Pattern>,
        b: &Arc<Pattern>,
        cur: Cursor<'a>,
        follow: &TokenSet,
        absorb: &Absorb,
    ) -> Result<(Operator, Cursor<'a>, Absorb), CompileError> {
        for branch in [a, b] {
            self.nonempty_inner(item, branch)?;
        }
        let (fa, fb) = (a.first().clone(), b.first().clone());
        self.decision_sets(item, &fa, &fb, &b.label, absorb)?;

        let (after, reaches_end) = cur.first();
        let inner_follow = if reaches_end { after.union(follow) } else { after.clone() };
        let mut branches = Vec::with_capacity(2);
        for (branch, first) in [(a, &fa), (b, &fb)] {
            let items = [Arc::clone(branch)];
            let start = derive(Cursor::new(&items), first, item)?;
            let (ops, pending) = self.scope(start, &inner_follow, Absorb::default())?;
            self.check_disjoint(&pending, &inner_follow, &branch.label)?;
            branches.push((ops, pending));
        }
        let (mut ops_b, pend_b) = branches.pop().unwrap();
        let (mut ops_a, pend_a) = branches.pop().unwrap();
        let condition = self.condition(absorb, fa, fb);

        if pend_a.same_tokens(&pend_b) {
            let op = Operator::IfElse(IfElseOp {
                condition,
                if_body: opt_op(ops_a),
                else_body: opt_op(ops_b),
            });
            return Ok((op, cur, pend_a));
        }
        // Branches leave different stay sets pending: each branch consumes the
        // next token itself so both rejoin at the same point.
        let exit = self.exit(item, &cur, follow)?;
        ops_a.push(self.wait(&pend_a, exit.clone()));
        ops_b.push(self.wait(&pend_b, exit.clone()));
        let op = Operator::IfElse(IfElseOp {
            condition,
            if_body: opt_op(ops_a),
            else_body: opt_op(ops_b),
        });
        Ok((op, derive(cur, &exit, item)?, Absorb::default()))
    }
}

fn into_op(mut ops: Vec<Operator>) -> Operator {
    if ops.len() == 1 {
        ops.pop().unwrap()
    } else {
        Operator::Sequence(ops)
    }
}

fn opt_op(ops: Vec<Operator>) -> Option<Box<Operator>> {
    (!ops.is_empty()).then(|| Box::new(into_op(ops)))
}

/// Continuation of `cur` after consuming any one token of `set`. Fails when
/// different tokens of `set` would leave different continuations.
fn derive<'a>(mut cur: Cursor<'a>, set: &TokenSet, at: &Pattern) -> Result<Cursor<'a>, CompileError> {
    let undecidable = |reason: String| CompileError::Undecidable {
        subexpr: at.label.clone(),
        reason,
    };
    let Some(head) = cur.pop() else {
        return Err(undecidable("no continuation after the deciding token".into()));
    };
    match &head.kind {
        PatternKind::Lit(ids) => {
            if !set.is_subset(&TokenSet::singleton(ids[0])) {
                return Err(undecidable(format!("`{}` does not start with {set:?}", head.label)));
            }
            if ids.len() > 1 {
                cur.prefix.push_front(Pattern::lit(ids[1..].to_vec(), head.label.clone()));
            }
            Ok(cur)
        }
        PatternKind::Class { set: cls, .. } => {
            if set.is_subset(cls) {
                Ok(cur)
            } else {
                Err(undecidable(format!("`{}` does not cover {set:?}", head.label)))
            }
        }
        PatternKind::Seq(parts) => {
            cur.push_front_all(parts.iter().cloned());
            derive(cur, set, at)
        }
        PatternKind::Plus(inner) => {
            cur.push_front_all([Arc::clone(inner), Pattern::star(Arc::clone(inner))].into_iter());
            derive(cur, set, at)
        }
        PatternKind::Star(inner) => {
            let mut enter = cur.clone();
            enter.push_front_all([Arc::clone(inner), Arc::clone(&head)].into_iter());
            choose(vec![enter, cur], set, at)
        }
        PatternKind::Opt(inner) => {
            let mut enter = cur.clone();
            enter.prefix.push_front(Arc::clone(inner));
            choose(vec![enter, cur], set, at)
        }
        PatternKind::Alt(a, b) => {
            let mut left = cur.clone();
            left.prefix.push_front(Arc::clone(a));
            let mut right = cur;
            right.prefix.push_front(Arc::clone(b));
            choose(vec![left, right], set, at)
        }
    }
}

fn choose<'a>(options: Vec<Cursor<'a>>, set: &TokenSet, at: &Pattern) -> Result<Cursor<'a>, CompileError> {
    let mut result: Option<Cursor<'a>> = None;
    let mut covered = TokenSet::new();
    for opt in options {
        let part = set.intersection(&opt.first().0);
        if part.is_empty() {
            continue;
        }
        covered = covered.union(&part);
        let next = derive(opt, &part, at)?;
        match &result {
            None => result = Some(next),
            Some(prev) if prev.same_as(&next) => {}
            Some(_) => {
                return Err(CompileError::Undecidable {
                    subexpr: at.label.clone(),
                    reason: format!("tokens {set:?} lead to different continuations"),
                })
            }
        }
    }
    match result {
        Some(r) if covered == *set => Ok(r),
        _ => Err(CompileError::Undecidable {
            subexpr: at.label.clone(),
            reason: format!("no continuation accepts {set:?}"),
        }),
    }
}

/// Compiles `pattern` followed by end-of-sequence into an operator tree.
pub fn compile_pattern(pattern: &Arc<Pattern>, vocab: &Vocabulary) -> Result<Operator, CompileError> {
    let eos = Pattern::lit(vec![vocab.eos_id()], "<eos>");
    let items = [Arc::clone(pattern), eos];
    let compiler = Compiler {
        vocab_size: vocab.len(),
    };
    let (ops, pending) = compiler.scope(Cursor::new(&items), &TokenSet::new(), Absorb::default())?;
    debug_assert!(pending.set.is_empty(), "eos consumes any pending stay set");
    Ok(into_op(ops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{MachineState, StepOutcome};
    use crate::regex::{lower, parse_regex};

    fn vocab() -> Vocabulary {
        // 0-9 digits, 10 ".", 11 "a", 12 "b", 13 eos
        let mut toks: Vec<String> = (0..10).map(|d| d.to_string()).collect();
        toks.extend([".", "a", "b", "<eos>"].map(String::from));
        let refs: Vec<&str> = toks.iter().map(String::as_str).collect();
        Vocabulary::from_strs(&refs, "<eos>").unwrap()
    }

    fn compile(p: &str, v: &Vocabulary) -> Result<Operator, CompileError> {
        compile_pattern(&lower(&parse_regex(p).unwrap(), v)?, v)
    }

    fn accepts(op: &Operator, v: &Vocabulary, text: &str) -> bool {
        let mut m = MachineState::start(op, v.len()).unwrap();
        let mut ids = v.tokenize(text.as_bytes()).unwrap();
        ids.push(v.eos_id());
        for (i, t) in ids.iter().enumerate() {
            match m.step(*t).unwrap() {
                StepOutcome::Rejected => return false,
                StepOutcome::Finished => return i == ids.len() - 1,
                StepOutcome::Advanced => {}
            }
        }
        false
    }

    #[test]
    fn dotted_number_shape() {
        let v = vocab();
        let op = compile(r"\d+(\.\d+)*", &v).unwrap();
        let expected = "\
Sequence
  Wait allow={0 1 2 3 4 5 6 7 8 9} wait={0 1 2 3 4 5 6 7 8 9}
  IfElse
    condition: Wait allow={0 1 2 3 4 5 6 7 8 9 10 13} true_waits={13} false_waits={10}
    if_body: None
    else_body:
      DoWhile
        body:
          Wait allow={0 1 2 3 4 5 6 7 8 9} wait={0 1 2 3 4 5 6 7 8 9}
        condition: Wait allow={0 1 2 3 4 5 6 7 8 9 10 13} true_waits={10} false_waits={13}
";
        assert_eq!(op.dump(), expected);
    }

    #[test]
    fn literal_concat() {
        let v = vocab();
        let op = compile("ab", &v).unwrap();
        assert_eq!(op.dump(), "Sequence\n  Write [11]\n  Write [12]\n  Write [13]\n");
    }

    #[test]
    fn star_then_same_literal_is_rejected() {
        let v = vocab();
        match compile("a*a", &v) {
            Err(CompileError::Overlap { subexpr, tokens, .. }) => {
                assert_eq!(subexpr, "a*");
                assert_eq!(tokens.ids(), &[11]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(compile("(ab)*a", &v), Err(CompileError::Overlap { .. })));
    }

    #[test]
    fn languages() {
        let v = vocab();
        let cases: &[(&str, &[&str], &[&str])] = &[
            ("a?b", &["b", "ab"], &["", "a", "aab"]),
            ("(ab)*", &["", "ab", "abab"], &["a", "aba", "b"]),
            ("(ab|b)a", &["aba", "ba"], &["a", "aa", "abba"]),
            (r"a\d*b", &["ab", "a12b"], &["a1", "b"]),
            ("(ab)+1", &["ab1", "abab1"], &["1", "ab", "aba1"]),
            (r"(a\d+)+", &["a1", "a12a3"], &["a", "1", "aa1"]),
            (r"(a|\d+)b", &["ab", "12b"], &["b", "a1b"]),
            (r"[^.]*\.", &[".", "a1b."], &["", "a"]),
            ("a*b*", &["", "aab", "bb"], &["ba", "aba"]),
            (r"a*[ab]*", &["", "ba", "abab"], &["1"]),
            (r"\d*a*b", &["b", "12b", "2aab"], &["a2b", "2a"]),
        ];
        for (pat, yes, no) in cases {
            let op = compile(pat, &v).unwrap_or_else(|e| panic!("{pat}: {e}"));
            for s in *yes {
                assert!(accepts(&op, &v, s), "{pat} should accept {s:?}\n{}", op.dump());
            }
            for s in *no {
                assert!(!accepts(&op, &v, s), "{pat} should reject {s:?}\n{}", op.dump());
            }
        }
    }

    #[test]
    fn negated_class_uses_deny_mode() {
        let v = vocab();
        let op = compile(r"[^.]*\.", &v).unwrap();
        assert_eq!(op.dump(), "Sequence\n  Wait deny={13} wait={10}\n  Write [13]\n");
    }

    #[test]
    fn nested_exit_into_outer_loop_is_undecidable() {
        let v = vocab();
        assert!(matches!(compile("(a|1b)+", &v), Err(CompileError::Undecidable { .. })));
        assert!(matches!(compile("(a(b1)*)*", &v), Err(CompileError::Undecidable { .. })));
    }

    #[test]
    fn deterministic() {
        let v = vocab();
        let a = compile(r"(a|\d+)b(\.\d)*", &v).unwrap().dump();
        let b = compile(r"(a|\d+)b(\.\d)*", &v).unwrap().dump();
        assert_eq!(a, b);
    }
}
