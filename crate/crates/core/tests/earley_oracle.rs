use opmask::earley::{parse, EarleyError, Grammar, Production, Sym, Tree};
use proptest::prelude::*;

const NONTERMINALS: u32 = 4;
const TERMINALS: u32 = 3;

/// Least fixpoint of "nonterminal A derives input[i..j]"; handles epsilon
/// and unit cycles that a CNF-based CYK would need rewriting for.
fn derives_table(g: &Grammar, input: &[u32]) -> Vec<Vec<Vec<bool>>> {
    let n = input.len();
    let mut d = vec![vec![vec![false; n + 1]; n + 1]; NONTERMINALS as usize];
    loop {
        let mut changed = false;
        for p in &g.productions {
            for i in 0..=n {
                // reach[j]: rhs prefix can span input[i..j]
                let mut reach = vec![false; n + 1];
                reach[i] = true;
                for s in &p.rhs {
                    let mut next = vec![false; n + 1];
                    for k in i..=n {
                        if !reach[k] {
                            continue;
                        }
                        match *s {
                            Sym::T(t) => {
                                if k < n && input[k] == t {
                                    next[k + 1] = true;
                                }
                            }
                            Sym::N(a) => {
                                for j in k..=n {
                                    if d[a as usize][k][j] {
                                        next[j] = true;
                                    }
                                }
                            }
                        }
                    }
                    reach = next;
                }
                for j in i..=n {
                    if reach[j] && !d[p.lhs as usize][i][j] {
                        d[p.lhs as usize][i][j] = true;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return d;
        }
    }
}

fn sym() -> impl Strategy<Value = Sym> {
    prop_oneof![
        (0..TERMINALS).prop_map(Sym::T),
        (0..NONTERMINALS).prop_map(Sym::N),
    ]
}

fn grammar() -> impl Strategy<Value = Grammar> {
    prop::collection::vec((0..NONTERMINALS, prop::collection::vec(sym(), 0..4)), 1..9).prop_map(|ps| {
        let productions = ps.into_iter().map(|(lhs, rhs)| Production { lhs, rhs }).collect();
        Grammar::new(0, productions)
    })
}

/// Checks that a tree spells `input` and every node follows its production.
fn check_tree(g: &Grammar, tree: &Tree, input: &[u32], pos: &mut usize, expect: Sym) -> bool {
    match tree {
        Tree::Leaf(i) => {
            let ok = *i == *pos && expect == Sym::T(input[*i]);
            *pos += 1;
            ok
        }
        Tree::Node { prod, children } => {
            let p = &g.productions[*prod];
            expect == Sym::N(p.lhs)
                && children.len() == p.rhs.len()
                && children.iter().zip(&p.rhs).all(|(c, s)| check_tree(g, c, input, pos, *s))
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn recognition_agrees_with_fixpoint(g in grammar(), input in prop::collection::vec(0..TERMINALS, 0..7)) {
        let expected = derives_table(&g, &input)[0][0][input.len()];
        let chart = parse(&g, &input);
        prop_assert_eq!(chart.is_ok(), expected);
        if let Ok(chart) = chart {
            match chart.tree() {
                Ok(tree) => {
                    let mut pos = 0;
                    prop_assert!(check_tree(&g, &tree, &input, &mut pos, Sym::N(0)));
                    prop_assert_eq!(pos, input.len());
                }
                Err(EarleyError::Ambiguous { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected {e:?}"),
            }
        }
    }
}

#[test]
fn left_recursion_and_nullables() {
    use Sym::{N, T};
    // S -> S a | B ; B -> b | ε
    let g = Grammar::new(
        0,
        vec![
            Production { lhs: 0, rhs: vec![N(0), T(0)] },
            Production { lhs: 0, rhs: vec![N(1)] },
            Production { lhs: 1, rhs: vec![T(1)] },
            Production { lhs: 1, rhs: vec![] },
        ],
    );
    for (input, ok) in [(&[][..], true), (&[0, 0, 0], true), (&[1, 0], true), (&[0, 1], false)] {
        assert_eq!(parse(&g, input).is_ok(), ok, "{input:?}");
    }
}

#[test]
fn ambiguity_is_refused() {
    use Sym::{N, T};
    // S -> S S | a
    let g = Grammar::new(
        0,
        vec![Production { lhs: 0, rhs: vec![N(0), N(0)] }, Production { lhs: 0, rhs: vec![T(0)] }],
    );
    assert!(parse(&g, &[0, 0]).unwrap().tree().is_ok());
    assert!(matches!(parse(&g, &[0, 0, 0]).unwrap().tree(), Err(EarleyError::Ambiguous { .. })));
}
