//! LALR(1) table construction and a shift-reduce driver.
//!
//! Tables are built from canonical LR(1) item sets merged by core. Grammars
//! are small (tens of productions), so the canonical collection is cheap;
//! callers build a table once and keep it.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use crate::earley::{Grammar, Sym};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Error,
    Shift(u32),
    Reduce(u32),
    Accept,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LalrError {
    #[error("grammar is not LALR(1): state {state} on terminal {terminal}: {first:?} vs {second:?}")]
    Conflict {
        state: usize,
        terminal: u32,
        first: Action,
        second: Action,
    },
    /// Input position of the offending token; `input.len()` means end of input.
    #[error("unexpected token at {pos}")]
    Unexpected { pos: usize },
}

/// (production, dot, lookahead); the augmented production has index
/// `productions.len()`.
type Item = (u32, u32, u32);

#[derive(Debug)]
pub struct Table {
    actions: Vec<Vec<Action>>,
    gotos: Vec<Vec<Option<u32>>>,
    rhs_len: Vec<usize>,
    lhs: Vec<u32>,
    eof: u32,
}

struct Analysis<'g> {
    g: &'g Grammar,
    first: Vec<BTreeSet<u32>>,
    augmented: u32,
    aug_rhs: [Sym; 1],
}

impl Analysis<'_> {
    fn rhs(&self, prod: u32) -> &[Sym] {
        if prod == self.augmented {
            &self.aug_rhs
        } else {
            &self.g.productions[prod as usize].rhs
        }
    }

    /// FIRST of `syms` followed by `la`.
    fn first_of(&self, syms: &[Sym], la: u32, out: &mut BTreeSet<u32>) {
        for s in syms {
            match *s {
                Sym::T(t) => {
                    out.insert(t);
                    return;
                }
                Sym::N(n) => {
                    out.extend(&self.first[n as usize]);
                    if !self.g.is_nullable(n) {
                        return;
                    }
                }
            }
        }
        out.insert(la);
    }

    fn closure(&self, kernel: BTreeSet<Item>) -> BTreeSet<Item> {
        let mut set = kernel;
        let mut work: Vec<Item> = set.iter().copied().collect();
        while let Some((prod, dot, la)) = work.pop() {
            let rhs = self.rhs(prod);
            let Some(Sym::N(n)) = rhs.get(dot as usize).copied() else { continue };
            let mut las = BTreeSet::new();
            self.first_of(&rhs[dot as usize + 1..], la, &mut las);
            for (i, p) in self.g.productions.iter().enumerate() {
                if p.lhs != n {
                    continue;
                }
                for &l in &las {
                    let item = (i as u32, 0, l);
                    if set.insert(item) {
                        work.push(item);
                    }
                }
            }
        }
        set
    }
}

impl Table {
    pub fn build(g: &Grammar) -> Result<Table, LalrError> {
        let n_nonterm = g
            .productions
            .iter()
            .flat_map(|p| std::iter::once(p.lhs).chain(p.rhs.iter().filter_map(|s| if let Sym::N(n) = s { Some(*n) } else { None })))
            .chain([g.start])
            .max()
            .unwrap_or(0) as usize
            + 1;
        let eof = g
            .productions
            .iter()
            .flat_map(|p| p.rhs.iter().filter_map(|s| if let Sym::T(t) = s { Some(*t + 1) } else { None }))
            .max()
            .unwrap_or(0);
        let n_term = eof as usize + 1;

        let mut first = vec![BTreeSet::new(); n_nonterm];
        loop {
            let mut changed = false;
            for p in &g.productions {
                let mut add = BTreeSet::new();
                for s in &p.rhs {
                    match *s {
                        Sym::T(t) => {
                            add.insert(t);
                            break;
                        }
                        Sym::N(n) => {
                            add.extend(&first[n as usize]);
                            if !g.is_nullable(n) {
                                break;
                            }
                        }
                    }
                }
                let before = first[p.lhs as usize].len();
                first[p.lhs as usize].extend(add);
                changed |= first[p.lhs as usize].len() != before;
            }
            if !changed {
                break;
            }
        }
        let an = Analysis {
            g,
            first,
            augmented: g.productions.len() as u32,
            aug_rhs: [Sym::N(g.start)],
        };

        // canonical LR(1) collection
        let start = an.closure([(an.augmented, 0, eof)].into_iter().collect());
        let mut states: Vec<BTreeSet<Item>> = vec![start.clone()];
        let mut index: HashMap<BTreeSet<Item>, usize> = HashMap::from([(start, 0)]);
        let mut edges: Vec<BTreeMap<Sym, usize>> = vec![BTreeMap::new()];
        let mut i = 0;
        while i < states.len() {
            let mut by_sym: BTreeMap<Sym, BTreeSet<Item>> = BTreeMap::new();
            for &(prod, dot, la) in &states[i] {
                if let Some(s) = an.rhs(prod).get(dot as usize) {
                    by_sym.entry(*s).or_default().insert((prod, dot + 1, la));
                }
            }
            for (sym, kernel) in by_sym {
                let set = an.closure(kernel);
                let j = match index.get(&set) {
                    Some(&j) => j,
                    None => {
                        states.push(set.clone());
                        edges.push(BTreeMap::new());
                        index.insert(set, states.len() - 1);
                        states.len() - 1
                    }
                };
                edges[i].insert(sym, j);
            }
            i += 1;
        }

        // merge by core
        let core = |s: &BTreeSet<Item>| s.iter().map(|&(p, d, _)| (p, d)).collect::<BTreeSet<_>>();
        let mut core_ids: BTreeMap<BTreeSet<(u32, u32)>, usize> = BTreeMap::new();
        let mut merged_of = vec![0usize; states.len()];
        let mut merged: Vec<BTreeSet<Item>> = Vec::new();
        for (i, s) in states.iter().enumerate() {
            let c = core(s);
            let id = *core_ids.entry(c).or_insert_with(|| {
                merged.push(BTreeSet::new());
                merged.len() - 1
            });
            merged[id].extend(s.iter().copied());
            merged_of[i] = id;
        }

        let mut actions = vec![vec![Action::Error; n_term]; merged.len()];
        let mut gotos = vec![vec![None; n_nonterm]; merged.len()];
        let set_action = |actions: &mut Vec<Vec<Action>>, state: usize, t: u32, a: Action| {
            let slot = &mut actions[state][t as usize];
            if *slot != Action::Error && *slot != a {
                return Err(LalrError::Conflict {
                    state,
                    terminal: t,
                    first: *slot,
                    second: a,
                });
            }
            *slot = a;
            Ok(())
        };
        for (i, e) in edges.iter().enumerate() {
            let m = merged_of[i];
            for (sym, &j) in e {
                match *sym {
                    Sym::T(t) => set_action(&mut actions, m, t, Action::Shift(merged_of[j] as u32))?,
                    Sym::N(n) => gotos[m][n as usize] = Some(merged_of[j] as u32),
                }
            }
        }
        for (m, set) in merged.iter().enumerate() {
            for &(prod, dot, la) in set {
                if dot as usize == an.rhs(prod).len() {
                    let a = if prod == an.augmented { Action::Accept } else { Action::Reduce(prod) };
                    set_action(&mut actions, m, la, a)?;
                }
            }
        }
        Ok(Table {
            actions,
            gotos,
            rhs_len: g.productions.iter().map(|p| p.rhs.len()).collect(),
            lhs: g.productions.iter().map(|p| p.lhs).collect(),
            eof,
        })
    }

    pub fn state_count(&self) -> usize {
        self.actions.len()
    }

    /// Runs the shift-reduce automaton over terminal kinds. `shift(i)` makes
    /// the value for input position `i`; `reduce(prod, children)` combines.
    pub fn parse<V>(
        &self,
        input: &[u32],
        mut shift: impl FnMut(usize) -> V,
        mut reduce: impl FnMut(usize, Vec<V>) -> V,
    ) -> Result<V, LalrError> {
        let mut states: Vec<u32> = vec![0];
        let mut values: Vec<V> = Vec::new();
        let mut pos = 0;
        loop {
            let t = input.get(pos).copied().unwrap_or(self.eof);
            let row = &self.actions[*states.last().unwrap() as usize];
            match row.get(t as usize).copied().unwrap_or(Action::Error) {
                Action::Shift(s) => {
                    states.push(s);
                    values.push(shift(pos));
                    pos += 1;
                }
                Action::Reduce(p) => {
                    let n = self.rhs_len[p as usize];
                    states.truncate(states.len() - n);
                    let children = values.split_off(values.len() - n);
                    values.push(reduce(p as usize, children));
                    let top = *states.last().unwrap() as usize;
                    let next = self.gotos[top][self.lhs[p as usize] as usize].expect("goto defined after reduce");
                    states.push(next);
                }
                Action::Accept => return Ok(values.pop().expect("accepted value")),
                Action::Error => return Err(LalrError::Unexpected { pos }),
            }
        }
    }
}
