#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use opmask::frontend::RequestDoc;
use opmask::operators::{MachineState, Operator, Program, StepOutcome};
use opmask::pattern::compile_pattern;
use opmask::regex::{lower, parse_regex};
use opmask::template::{compile_templates, StructureFactory};
use opmask::vocab::{TokenId, Vocabulary};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn vocab(name: &str) -> Vocabulary {
    Vocabulary::load(&fixture(name)).unwrap()
}

pub fn outline() -> (Vocabulary, StructureFactory, RequestDoc) {
    let v = vocab("outline.vocab");
    let src = std::fs::read_to_string(fixture("outline.wgram")).unwrap();
    let f = compile_templates(&src, &v).unwrap();
    let doc = RequestDoc::load(&fixture("outline.request.json")).unwrap();
    (v, f, doc)
}

/// Regexes over `chars12.vocab` (a b c x 0 1 2 . - space comma) that the
/// compiler supports.
pub const CHAR_REGEXES: [&str; 20] = [
    "ab",
    "a*b",
    r"\d+",
    r"\d+(\.\d+)*",
    r"[^.]*\.",
    "(ab)+c",
    "x(a|b)*x",
    r"-?\d+",
    "[abc]+ x",
    r"\w+,\w+",
    r"\d*\.\d+",
    r"(\d\d)+",
    "a(b|c)?x",
    "[^ ]+ [^ ]+",
    "(a|b)(0|1)*",
    r"c(\.|-)+c",
    "(a-)*b",
    "1(0|1)*2?",
    "(ab|c)(,(ab|c))*",
    "[a-c]+(-[0-2]+)?",
];

pub fn compile_regex(src: &str, v: &Vocabulary) -> Operator {
    let p = lower(&parse_regex(src).unwrap(), v).unwrap();
    compile_pattern(&p, v).unwrap()
}

/// Counts sequences of non-eos tokens up to `max_len` where machine acceptance
/// (tokens then eos) disagrees with full-match of the detokenized text.
/// Returns (sequences checked, discrepancies, first discrepancy).
pub fn bounded_equivalence(src: &str, v: &Vocabulary, max_len: usize) -> (u64, u64, Option<String>) {
    let oracle = regex::Regex::new(&format!("^(?:{src})$")).unwrap();
    let program = Program::new(&compile_regex(src, v), v.len()).unwrap();
    let tokens: Vec<TokenId> = v.all_ids().iter().filter(|t| *t != v.eos_id()).collect();
    let mut stats = (0u64, 0u64, None);
    let mut text = Vec::new();
    walk(
        Some(MachineState::from_program(program)),
        &mut text,
        max_len,
        &tokens,
        v,
        &oracle,
        &mut stats,
    );
    stats
}

fn walk(
    state: Option<MachineState>,
    text: &mut Vec<u8>,
    depth_left: usize,
    tokens: &[TokenId],
    v: &Vocabulary,
    oracle: &regex::Regex,
    stats: &mut (u64, u64, Option<String>),
) {
    let accepted = state.as_ref().is_some_and(|s| {
        let mut s = s.clone();
        !s.is_finished() && s.step(v.eos_id()).unwrap() == StepOutcome::Finished
    });
    let s = std::str::from_utf8(text).unwrap();
    let expected = oracle.is_match(s);
    stats.0 += 1;
    if accepted != expected {
        stats.1 += 1;
        stats.2.get_or_insert_with(|| format!("{s:?}: machine={accepted} oracle={expected}"));
    }
    if depth_left == 0 {
        return;
    }
    for &t in tokens {
        let next = state.as_ref().and_then(|s| {
            let mut s = s.clone();
            match s.step(t).unwrap() {
                StepOutcome::Advanced => Some(s),
                // a finished machine accepts nothing more
                StepOutcome::Finished | StepOutcome::Rejected => None,
            }
        });
        let len = text.len();
        text.extend_from_slice(v.token(t).unwrap());
        walk(next, text, depth_left - 1, tokens, v, oracle, stats);
        text.truncate(len);
    }
}

pub struct StateGraph {
    pub states: Vec<MachineState>,
    /// successors per state (live states only)
    pub edges: Vec<Vec<usize>>,
    pub finished: Vec<bool>,
}

/// All machine states reachable from the start, up to `limit`.
pub fn reachable(program: Arc<Program>, limit: usize) -> StateGraph {
    let size = program.vocab_size();
    let start = MachineState::from_program(program);
    let mut index: HashMap<MachineState, usize> = HashMap::from([(start.clone(), 0)]);
    let mut g = StateGraph {
        states: vec![start],
        edges: vec![Vec::new()],
        finished: vec![false],
    };
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        if g.finished[i] {
            continue;
        }
        for t in 0..size as TokenId {
            let mut s = g.states[i].clone();
            if s.step(t).unwrap() == StepOutcome::Rejected {
                continue;
            }
            let j = match index.get(&s) {
                Some(&j) => j,
                None => {
                    assert!(g.states.len() < limit, "more than {limit} reachable states");
                    let j = g.states.len();
                    index.insert(s.clone(), j);
                    g.finished.push(s.is_finished());
                    g.states.push(s);
                    g.edges.push(Vec::new());
                    queue.push_back(j);
                    j
                }
            };
            if !g.edges[i].contains(&j) {
                g.edges[i].push(j);
            }
        }
    }
    g
}

impl StateGraph {
    /// States from which no finished state is reachable.
    pub fn dead_ends(&self) -> Vec<usize> {
        let mut rev: Vec<Vec<usize>> = vec![Vec::new(); self.states.len()];
        for (i, es) in self.edges.iter().enumerate() {
            for &j in es {
                rev[j].push(i);
            }
        }
        let mut good = self.finished.clone();
        let mut queue: VecDeque<usize> = (0..good.len()).filter(|i| good[*i]).collect();
        while let Some(j) = queue.pop_front() {
            for &i in &rev[j] {
                if !good[i] {
                    good[i] = true;
                    queue.push_back(i);
                }
            }
        }
        (0..good.len()).filter(|i| !good[*i]).collect()
    }

    /// (state, token) pairs where step acceptance and the mask disagree.
    pub fn mask_violations(&self) -> Vec<(usize, TokenId)> {
        let mut out = Vec::new();
        for (i, s) in self.states.iter().enumerate() {
            if s.is_finished() {
                continue;
            }
            let spec = s.current_mask_spec().unwrap();
            let size = s.program().vocab_size();
            for t in 0..size as TokenId {
                let mut c = s.clone();
                let stepped = c.step(t).unwrap() != StepOutcome::Rejected;
                if stepped != spec.permits(t, size) {
                    out.push((i, t));
                }
            }
        }
        out
    }
}

/// Oracle for outline outputs of the fixture request: the fixed skeleton
/// with free-text regions matched loosely.
pub fn outline_skeleton() -> regex::Regex {
    let words = "[a-z]+(?: [a-z]+)*";
    let para = format!(r"<p>{words}\.(?: {words}\.)*</p>\n");
    let list = format!(r"<ul>\n(?:<li>{words}</li>\n)+</ul>\n");
    let re = format!(
        r"^<h1>Introduction</h1>\n{para}(?:<h2>Method</h2>\n{para}<h3>Details</h3>\n(?:{para}|{list}))+<h1>Notes</h1>\n<p><b>[^<]*</b></p>\n$"
    );
    regex::Regex::new(&re).unwrap()
}
