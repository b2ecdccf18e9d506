//! Earley chart parser over a small symbolic grammar.
//!
//! Handles arbitrary context-free grammars, including left recursion and
//! nullable rules (predicted nullable nonterminals are skipped immediately).
//! Tree extraction counts derivations per span and refuses ambiguous input.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

static PARSES: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static THREAD_PARSES: Cell<u64> = const { Cell::new(0) };
}

/// Number of Earley parses run in this process.
pub fn invocations() -> u64 {
    PARSES.load(Ordering::Relaxed)
}

/// Number of Earley parses run on the calling thread.
pub fn thread_invocations() -> u64 {
    THREAD_PARSES.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    T(u32),
    N(u32),
}

#[derive(Debug, Clone)]
pub struct Production {
    pub lhs: u32,
    pub rhs: Vec<Sym>,
}

#[derive(Debug, Clone)]
pub struct Grammar {
    pub start: u32,
    pub productions: Vec<Production>,
    nullable: Vec<bool>,
    by_lhs: Vec<Vec<usize>>,
}

impl Grammar {
    pub fn new(start: u32, productions: Vec<Production>) -> Self {
        let n = productions
            .iter()
            .flat_map(|p| std::iter::once(p.lhs).chain(p.rhs.iter().filter_map(|s| match s {
                Sym::N(n) => Some(*n),
                Sym::T(_) => None,
            })))
            .chain([start])
            .max()
            .unwrap_or(0) as usize
            + 1;
        let mut by_lhs = vec![Vec::new(); n];
        for (i, p) in productions.iter().enumerate() {
            by_lhs[p.lhs as usize].push(i);
        }
        let mut nullable = vec![false; n];
        loop {
            let mut changed = false;
            for p in &productions {
                if !nullable[p.lhs as usize]
                    && p.rhs.iter().all(|s| matches!(s, Sym::N(x) if nullable[*x as usize]))
                {
                    nullable[p.lhs as usize] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        Grammar {
            start,
            productions,
            nullable,
            by_lhs,
        }
    }

    pub fn is_nullable(&self, n: u32) -> bool {
        self.nullable[n as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    prod: u32,
    dot: u32,
    origin: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tree {
    Leaf(usize),
    Node { prod: usize, children: Vec<Tree> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EarleyError {
    /// No item survives after consuming the token at `pos`.
    Unexpected { pos: usize },
    /// All input consumed but the start symbol is incomplete.
    UnexpectedEnd,
    Ambiguous {
        nonterminal: u32,
        start: usize,
        end: usize,
        first: String,
        second: String,
    },
}

pub struct Chart<'g> {
    grammar: &'g Grammar,
    sets: Vec<Vec<Item>>,
    input: Vec<u32>,
}

/// Runs recognition over terminal kinds.
pub fn parse<'g>(grammar: &'g Grammar, input: &[u32]) -> Result<Chart<'g>, EarleyError> {
    PARSES.fetch_add(1, Ordering::Relaxed);
    THREAD_PARSES.with(|c| c.set(c.get() + 1));
    let n = input.len();
    let mut sets: Vec<Vec<Item>> = vec![Vec::new(); n + 1];
    let mut seen: Vec<HashSet<Item>> = vec![HashSet::new(); n + 1];
    let add = |sets: &mut Vec<Vec<Item>>, seen: &mut Vec<HashSet<Item>>, k: usize, item: Item| {
        if seen[k].insert(item) {
            sets[k].push(item);
        }
    };
    for &p in &grammar.by_lhs[grammar.start as usize] {
        add(&mut sets, &mut seen, 0, Item { prod: p as u32, dot: 0, origin: 0 });
    }
    for k in 0..=n {
        let mut i = 0;
        while i < sets[k].len() {
            let item = sets[k][i];
            i += 1;
            let prod = &grammar.productions[item.prod as usize];
            match prod.rhs.get(item.dot as usize) {
                Some(Sym::N(b)) => {
                    for &p in &grammar.by_lhs[*b as usize] {
                        add(&mut sets, &mut seen, k, Item { prod: p as u32, dot: 0, origin: k as u32 });
                    }
                    if grammar.is_nullable(*b) {
                        add(&mut sets, &mut seen, k, Item { dot: item.dot + 1, ..item });
                    }
                }
                Some(Sym::T(t)) => {
                    if k < n && input[k] == *t {
                        add(&mut sets, &mut seen, k + 1, Item { dot: item.dot + 1, ..item });
                    }
                }
                None => {
                    let lhs = prod.lhs;
                    let origin = item.origin as usize;
                    let mut j = 0;
                    while j < sets[origin].len() {
                        let parent = sets[origin][j];
                        j += 1;
                        let pp = &grammar.productions[parent.prod as usize];
                        if pp.rhs.get(parent.dot as usize) == Some(&Sym::N(lhs)) {
                            add(&mut sets, &mut seen, k, Item { dot: parent.dot + 1, ..parent });
                        }
                    }
                }
            }
        }
        if k < n && sets[k + 1].is_empty() {
            return Err(EarleyError::Unexpected { pos: k });
        }
    }
    let chart = Chart {
        grammar,
        sets,
        input: input.to_vec(),
    };
    if chart.accepts() {
        Ok(chart)
    } else {
        Err(EarleyError::UnexpectedEnd)
    }
}

/// Recognition only.
pub fn recognize(grammar: &Grammar, input: &[u32]) -> bool {
    parse(grammar, input).is_ok()
}

impl Chart<'_> {
    fn accepts(&self) -> bool {
        let n = self.input.len();
        self.sets[n].iter().any(|it| {
            let p = &self.grammar.productions[it.prod as usize];
            it.origin == 0 && p.lhs == self.grammar.start && it.dot as usize == p.rhs.len()
        })
    }

    /// Extracts the unique parse tree, or reports the first ambiguous span.
    pub fn tree(&self) -> Result<Tree, EarleyError> {
        let mut ex = Extractor::new(self);
        let n = self.input.len();
        let start = self.grammar.start;
        ex.node(start, 0, n)
    }
}

struct Extractor<'c, 'g> {
    chart: &'c Chart<'g>,
    // productions completed over (origin, end)
    complete: HashSet<(u32, usize, usize)>,
    // nonterminals completed over (origin, end)
    spans: HashSet<(u32, usize, usize)>,
    ways_nt: HashMap<(u32, usize, usize), u8>,
    ways_seq: HashMap<(u32, usize, usize, usize), u8>,
    active: HashSet<(u32, usize, usize)>,
}

impl<'c, 'g> Extractor<'c, 'g> {
    fn new(chart: &'c Chart<'g>) -> Self {
        let mut complete = HashSet::new();
        let mut spans = HashSet::new();
        for (end, set) in chart.sets.iter().enumerate() {
            for it in set {
                let p = &chart.grammar.productions[it.prod as usize];
                if it.dot as usize == p.rhs.len() {
                    complete.insert((it.prod, it.origin as usize, end));
                    spans.insert((p.lhs, it.origin as usize, end));
                }
            }
        }
        Extractor {
            chart,
            complete,
            spans,
            ways_nt: HashMap::new(),
            ways_seq: HashMap::new(),
            active: HashSet::new(),
        }
    }

    // Number of derivations of `nt` over i..j, saturating at 2.
    fn ways(&mut self, nt: u32, i: usize, j: usize) -> u8 {
        if !self.spans.contains(&(nt, i, j)) {
            return 0;
        }
        if let Some(w) = self.ways_nt.get(&(nt, i, j)) {
            return *w;
        }
        if !self.active.insert((nt, i, j)) {
            return 0;
        }
        let mut total = 0u8;
        for &p in &self.chart.grammar.by_lhs[nt as usize] {
            if self.complete.contains(&(p as u32, i, j)) {
                total = total.saturating_add(self.seq_ways(p as u32, 0, i, j)).min(2);
            }
        }
        self.active.remove(&(nt, i, j));
        self.ways_nt.insert((nt, i, j), total);
        total
    }

    fn seq_ways(&mut self, prod: u32, k: usize, pos: usize, end: usize) -> u8 {
        let rhs_len = self.chart.grammar.productions[prod as usize].rhs.len();
        if k == rhs_len {
            return u8::from(pos == end);
        }
        if let Some(w) = self.ways_seq.get(&(prod, k, pos, end)) {
            return *w;
        }
        let sym = self.chart.grammar.productions[prod as usize].rhs[k];
        let total = match sym {
            Sym::T(t) => {
                if pos < end && self.chart.input[pos] == t {
                    self.seq_ways(prod, k + 1, pos + 1, end)
                } else {
                    0
                }
            }
            Sym::N(b) => {
                let mut total = 0u8;
                for q in pos..=end {
                    let w = self.ways(b, pos, q);
                    if w > 0 {
                        let rest = self.seq_ways(prod, k + 1, q, end);
                        total = total.saturating_add(w.saturating_mul(rest)).min(2);
                    }
                }
                total
            }
        };
        self.ways_seq.insert((prod, k, pos, end), total);
        total
    }

    fn node(&mut self, nt: u32, i: usize, j: usize) -> Result<Tree, EarleyError> {
        let mut found: Vec<usize> = Vec::new();
        for &p in &self.chart.grammar.by_lhs[nt as usize] {
            if self.complete.contains(&(p as u32, i, j)) && self.seq_ways(p as u32, 0, i, j) > 0 {
                found.push(p);
            }
        }
        let ambiguous = |first: String, second: String| EarleyError::Ambiguous {
            nonterminal: nt,
            start: i,
            end: j,
            first,
            second,
        };
        match found.as_slice() {
            [] => Err(EarleyError::UnexpectedEnd),
            [p] => {
                if self.seq_ways(*p as u32, 0, i, j) > 1 {
                    return Err(ambiguous(format!("production {p}"), format!("production {p} with another split")));
                }
                let children = self.children(*p, i, j)?;
                Ok(Tree::Node { prod: *p, children })
            }
            [a, b, ..] => Err(ambiguous(format!("production {a}"), format!("production {b}"))),
        }
    }

    fn children(&mut self, prod: usize, i: usize, j: usize) -> Result<Vec<Tree>, EarleyError> {
        let rhs = self.chart.grammar.productions[prod].rhs.clone();
        let mut out = Vec::with_capacity(rhs.len());
        let mut pos = i;
        for (k, sym) in rhs.iter().enumerate() {
            match sym {
                Sym::T(_) => {
                    out.push(Tree::Leaf(pos));
                    pos += 1;
                }
                Sym::N(b) => {
                    let q = (pos..=j)
                        .find(|&q| self.ways(*b, pos, q) > 0 && self.seq_ways(prod as u32, k + 1, q, j) > 0)
                        .ok_or(EarleyError::UnexpectedEnd)?;
                    out.push(self.node(*b, pos, q)?);
                    pos = q;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prod(lhs: u32, rhs: &[Sym]) -> Production {
        Production { lhs, rhs: rhs.to_vec() }
    }

    const A: u32 = 0;
    const PLUS: u32 = 1;

    // E -> E + E | a  (ambiguous)
    fn ambiguous_sum() -> Grammar {
        Grammar::new(
            0,
            vec![
                prod(0, &[Sym::N(0), Sym::T(PLUS), Sym::N(0)]),
                prod(0, &[Sym::T(A)]),
            ],
        )
    }

    // E -> E + a | a
    fn left_sum() -> Grammar {
        Grammar::new(0, vec![prod(0, &[Sym::N(0), Sym::T(PLUS), Sym::T(A)]), prod(0, &[Sym::T(A)])])
    }

    #[test]
    fn recognizes_left_recursion() {
        let g = left_sum();
        assert!(recognize(&g, &[A]));
        assert!(recognize(&g, &[A, PLUS, A, PLUS, A]));
        assert!(!recognize(&g, &[A, PLUS]));
        assert_eq!(parse(&g, &[PLUS]).err(), Some(EarleyError::Unexpected { pos: 0 }));
        assert_eq!(parse(&g, &[A, PLUS]).err(), Some(EarleyError::UnexpectedEnd));
    }

    #[test]
    fn unique_tree() {
        let g = left_sum();
        let chart = parse(&g, &[A, PLUS, A]).unwrap();
        let tree = chart.tree().unwrap();
        assert_eq!(
            tree,
            Tree::Node {
                prod: 0,
                children: vec![
                    Tree::Node {
                        prod: 1,
                        children: vec![Tree::Leaf(0)]
                    },
                    Tree::Leaf(1),
                    Tree::Leaf(2)
                ]
            }
        );
    }

    #[test]
    fn ambiguity_is_reported() {
        let g = ambiguous_sum();
        let chart = parse(&g, &[A, PLUS, A, PLUS, A]).unwrap();
        assert!(matches!(chart.tree(), Err(EarleyError::Ambiguous { .. })));
        assert!(parse(&g, &[A, PLUS, A]).unwrap().tree().is_ok());
    }

    #[test]
    fn nullable_rules() {
        // S -> A A x ; A -> ε | y
        let g = Grammar::new(
            0,
            vec![
                prod(0, &[Sym::N(1), Sym::N(1), Sym::T(7)]),
                prod(1, &[]),
                prod(1, &[Sym::T(8)]),
            ],
        );
        assert!(recognize(&g, &[7]));
        assert!(recognize(&g, &[8, 7]));
        assert!(recognize(&g, &[8, 8, 7]));
        assert!(!recognize(&g, &[8, 8, 8, 7]));
        // "y x" has two derivations (first or second A)
        assert!(matches!(parse(&g, &[8, 7]).unwrap().tree(), Err(EarleyError::Ambiguous { .. })));
    }

    #[test]
    fn counts_invocations() {
        let before = invocations();
        let _ = recognize(&left_sum(), &[A]);
        assert!(invocations() > before);
    }
}
