//! Operator trees and their execution as a frame-stack state machine.
//!
//! An [`Operator`] tree is both the grammar and the program. It is validated
//! and flattened once into a [`Program`]; a [`MachineState`] is a cursor stack
//! over that program. The top frame of a live state is always one of the
//! mask-emitting positions: a `Write` element, a waiting `Wait`, or the
//! condition of an `IfElse`/`DoWhile`.

use std::fmt::{self, Write as _};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use thiserror::Error;

use crate::mask::{MaskMode, MaskSpec};
use crate::vocab::{TokenId, TokenSet};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OperatorError {
    #[error("empty Sequence at {0}")]
    EmptySequence(String),
    #[error("empty Write at {0}")]
    EmptyWrite(String),
    #[error("Wait at {0} has no trigger tokens")]
    EmptyWaits(String),
    #[error("token sets overlap at {path}: {detail}")]
    Overlap { path: String, detail: String },
    #[error("condition at {0} needs non-empty true_waits and false_waits")]
    EmptyCondition(String),
    #[error("token id {id} out of range at {path} (vocabulary size {size})")]
    OutOfRange { id: TokenId, path: String, size: usize },
    #[error("machine already finished")]
    Finished,
}

/// Tokens a waiting operator may consume without triggering.
///
/// `Allow` lists them directly. `Deny` lists the excluded tokens: everything
/// else that is not a trigger is consumed in place.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StaySet {
    Allow(TokenSet),
    Deny(TokenSet),
}

impl StaySet {
    pub fn none() -> Self {
        StaySet::Allow(TokenSet::new())
    }

    fn permits(&self, t: TokenId, vocab_size: usize) -> bool {
        match self {
            StaySet::Allow(s) => s.contains(t),
            StaySet::Deny(s) => (t as usize) < vocab_size && !s.contains(t),
        }
    }

    fn ids(&self) -> &TokenSet {
        match self {
            StaySet::Allow(s) | StaySet::Deny(s) => s,
        }
    }

    fn mask_spec(&self, triggers: &TokenSet) -> MaskSpec {
        match self {
            StaySet::Allow(s) => MaskSpec::new(MaskMode::Allow, s.union(triggers)),
            StaySet::Deny(s) => MaskSpec::new(MaskMode::Deny, s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WaitOp {
    pub stay: StaySet,
    pub waits: TokenSet,
    pub body: Option<Box<Operator>>,
}

/// Boolean-form wait. Only valid in the condition slot of `IfElse`/`DoWhile`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Condition {
    pub stay: StaySet,
    pub true_waits: TokenSet,
    pub false_waits: TokenSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IfElseOp {
    pub condition: Condition,
    pub if_body: Option<Box<Operator>>,
    pub else_body: Option<Box<Operator>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DoWhileOp {
    pub body: Box<Operator>,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operator {
    Wait(WaitOp),
    Write(Vec<TokenId>),
    Sequence(Vec<Operator>),
    IfElse(IfElseOp),
    DoWhile(DoWhileOp),
}

impl Operator {
    pub fn wait(allows: TokenSet, waits: TokenSet) -> Self {
        Operator::Wait(WaitOp {
            stay: StaySet::Allow(allows),
            waits,
            body: None,
        })
    }

    pub fn write(ids: Vec<TokenId>) -> Self {
        Operator::Write(ids)
    }

    /// Static nesting depth; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        1 + match self {
            Operator::Wait(w) => w.body.as_deref().map_or(0, Operator::depth),
            Operator::Write(_) => 0,
            Operator::Sequence(c) => c.iter().map(Operator::depth).max().unwrap_or(0),
            Operator::IfElse(ie) => {
                let a = ie.if_body.as_deref().map_or(0, Operator::depth);
                let b = ie.else_body.as_deref().map_or(0, Operator::depth);
                a.max(b)
            }
            Operator::DoWhile(dw) => dw.body.depth(),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + match self {
            Operator::Wait(w) => w.body.as_deref().map_or(0, Operator::node_count),
            Operator::Write(_) => 0,
            Operator::Sequence(c) => c.iter().map(Operator::node_count).sum(),
            Operator::IfElse(ie) => {
                ie.if_body.as_deref().map_or(0, Operator::node_count)
                    + ie.else_body.as_deref().map_or(0, Operator::node_count)
            }
            Operator::DoWhile(dw) => dw.body.node_count(),
        }
    }

    /// Checks every structural invariant recursively.
    pub fn validate(&self, vocab_size: usize) -> Result<(), OperatorError> {
        self.validate_at("root", vocab_size)
    }

    fn validate_at(&self, path: &str, size: usize) -> Result<(), OperatorError> {
        let range = |set: &TokenSet| -> Result<(), OperatorError> {
            match set.iter().find(|id| *id as usize >= size) {
                Some(id) => Err(OperatorError::OutOfRange {
                    id,
                    path: path.to_string(),
                    size,
                }),
                None => Ok(()),
            }
        };
        let overlap = |a: &TokenSet, b: &TokenSet, what: &str| -> Result<(), OperatorError> {
            if a.is_disjoint(b) {
                Ok(())
            } else {
                Err(OperatorError::Overlap {
                    path: path.to_string(),
                    detail: format!("{what} share {:?}", a.intersection(b)),
                })
            }
        };
        match self {
            Operator::Write(seq) => {
                if seq.is_empty() {
                    return Err(OperatorError::EmptyWrite(path.to_string()));
                }
                range(&seq.iter().copied().collect())
            }
            Operator::Sequence(children) => {
                if children.is_empty() {
                    return Err(OperatorError::EmptySequence(path.to_string()));
                }
                children
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, c)| c.validate_at(&format!("{path}/{i}"), size))
            }
            Operator::Wait(w) => {
                if w.waits.is_empty() {
                    return Err(OperatorError::EmptyWaits(path.to_string()));
                }
                range(w.stay.ids())?;
                range(&w.waits)?;
                overlap(w.stay.ids(), &w.waits, "stay set and waits")?;
                match &w.body {
                    Some(b) => b.validate_at(&format!("{path}/body"), size),
                    None => Ok(()),
                }
            }
            Operator::IfElse(ie) => {
                validate_condition(&ie.condition, &format!("{path}/condition"), size)?;
                if let Some(b) = &ie.if_body {
                    b.validate_at(&format!("{path}/if"), size)?;
                }
                if let Some(b) = &ie.else_body {
                    b.validate_at(&format!("{path}/else"), size)?;
                }
                Ok(())
            }
            Operator::DoWhile(dw) => {
                validate_condition(&dw.condition, &format!("{path}/condition"), size)?;
                dw.body.validate_at(&format!("{path}/body"), size)
            }
        }
    }

    /// Deterministic indented text form with sorted token-id sets.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        self.dump_into(&mut out, 0);
        out
    }

    fn dump_into(&self, out: &mut String, indent: usize) {
        let pad = "  ".repeat(indent);
        match self {
            Operator::Write(seq) => {
                let ids: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
                let _ = writeln!(out, "{pad}Write [{}]", ids.join(" "));
            }
            Operator::Sequence(children) => {
                let _ = writeln!(out, "{pad}Sequence");
                for c in children {
                    c.dump_into(out, indent + 1);
                }
            }
            Operator::Wait(w) => {
                let _ = writeln!(out, "{pad}Wait {} wait={}", fmt_stay(&w.stay, &w.waits), fmt_set(&w.waits));
                if let Some(b) = &w.body {
                    let _ = writeln!(out, "{pad}  body:");
                    b.dump_into(out, indent + 2);
                }
            }
            Operator::IfElse(ie) => {
                let _ = writeln!(out, "{pad}IfElse");
                let _ = writeln!(out, "{pad}  condition: {}", fmt_condition(&ie.condition));
                dump_slot(out, indent + 1, "if_body", ie.if_body.as_deref());
                dump_slot(out, indent + 1, "else_body", ie.else_body.as_deref());
            }
            Operator::DoWhile(dw) => {
                let _ = writeln!(out, "{pad}DoWhile");
                dump_slot(out, indent + 1, "body", Some(&dw.body));
                let _ = writeln!(out, "{pad}  condition: {}", fmt_condition(&dw.condition));
            }
        }
    }
}

fn dump_slot(out: &mut String, indent: usize, name: &str, op: Option<&Operator>) {
    let pad = "  ".repeat(indent);
    match op {
        None => {
            let _ = writeln!(out, "{pad}{name}: None");
        }
        Some(op) => {
            let _ = writeln!(out, "{pad}{name}:");
            op.dump_into(out, indent + 1);
        }
    }
}

fn fmt_set(set: &TokenSet) -> String {
    let ids: Vec<String> = set.iter().map(|t| t.to_string()).collect();
    format!("{{{}}}", ids.join(" "))
}

// The printed `allow` set is the full permitted set: stay tokens plus triggers.
fn fmt_stay(stay: &StaySet, triggers: &TokenSet) -> String {
    match stay {
        StaySet::Allow(s) => format!("allow={}", fmt_set(&s.union(triggers))),
        StaySet::Deny(s) => format!("deny={}", fmt_set(s)),
    }
}

fn fmt_condition(c: &Condition) -> String {
    format!(
        "Wait {} true_waits={} false_waits={}",
        fmt_stay(&c.stay, &c.true_waits.union(&c.false_waits)),
        fmt_set(&c.true_waits),
        fmt_set(&c.false_waits)
    )
}

fn validate_condition(c: &Condition, path: &str, size: usize) -> Result<(), OperatorError> {
    if c.true_waits.is_empty() || c.false_waits.is_empty() {
        return Err(OperatorError::EmptyCondition(path.to_string()));
    }
    for set in [c.stay.ids(), &c.true_waits, &c.false_waits] {
        if let Some(id) = set.iter().find(|id| *id as usize >= size) {
            return Err(OperatorError::OutOfRange {
                id,
                path: path.to_string(),
                size,
            });
        }
    }
    let pairs = [
        (&c.true_waits, &c.false_waits, "true_waits and false_waits"),
        (c.stay.ids(), &c.true_waits, "stay set and true_waits"),
        (c.stay.ids(), &c.false_waits, "stay set and false_waits"),
    ];
    for (a, b, what) in pairs {
        if !a.is_disjoint(b) {
            return Err(OperatorError::Overlap {
                path: path.to_string(),
                detail: format!("{what} share {:?}", a.intersection(b)),
            });
        }
    }
    Ok(())
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

type NodeId = u32;

#[derive(Debug)]
struct CondNode {
    stay: StaySet,
    true_waits: TokenSet,
    false_waits: TokenSet,
    spec: Arc<MaskSpec>,
}

#[derive(Debug)]
enum Node {
    Wait {
        stay: StaySet,
        waits: TokenSet,
        body: Option<NodeId>,
        spec: Arc<MaskSpec>,
    },
    Write {
        seq: Vec<TokenId>,
        specs: Vec<Arc<MaskSpec>>,
    },
    Sequence(Vec<NodeId>),
    IfElse {
        cond: CondNode,
        if_body: Option<NodeId>,
        else_body: Option<NodeId>,
    },
    DoWhile {
        body: NodeId,
        cond: CondNode,
    },
}

/// Validated, flattened operator tree shared by every machine built from it.
#[derive(Debug)]
pub struct Program {
    nodes: Vec<Node>,
    root: NodeId,
    vocab_size: usize,
    depth: usize,
}

impl Program {
    pub fn new(root: &Operator, vocab_size: usize) -> Result<Arc<Self>, OperatorError> {
        root.validate(vocab_size)?;
        let mut prog = Program {
            nodes: Vec::with_capacity(root.node_count()),
            root: 0,
            vocab_size,
            depth: root.depth(),
        };
        prog.root = prog.flatten(root);
        Ok(Arc::new(prog))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Every distinct mask spec any state of this program can emit.
    pub fn mask_specs(&self) -> Vec<Arc<MaskSpec>> {
        let mut out: Vec<Arc<MaskSpec>> = Vec::new();
        for node in &self.nodes {
            match node {
                Node::Wait { spec, .. } => out.push(spec.clone()),
                Node::Write { specs, .. } => out.extend(specs.iter().cloned()),
                Node::IfElse { cond, .. } | Node::DoWhile { cond, .. } => out.push(cond.spec.clone()),
                Node::Sequence(_) => {}
            }
        }
        out.sort_by(|a, b| (a.mode, a.ids()).cmp(&(b.mode, b.ids())));
        out.dedup_by(|a, b| a == b);
        out
    }

    fn flatten(&mut self, op: &Operator) -> NodeId {
        let node = match op {
            Operator::Write(seq) => Node::Write {
                seq: seq.clone(),
                specs: seq
                    .iter()
                    .map(|t| Arc::new(MaskSpec::new(MaskMode::Allow, TokenSet::singleton(*t))))
                    .collect(),
            },
            Operator::Sequence(children) => {
                let ids = children.iter().map(|c| self.flatten(c)).collect();
                Node::Sequence(ids)
            }
            Operator::Wait(w) => Node::Wait {
                spec: Arc::new(w.stay.mask_spec(&w.waits)),
                stay: w.stay.clone(),
                waits: w.waits.clone(),
                body: w.body.as_deref().map(|b| self.flatten(b)),
            },
            Operator::IfElse(ie) => Node::IfElse {
                cond: cond_node(&ie.condition),
                if_body: ie.if_body.as_deref().map(|b| self.flatten(b)),
                else_body: ie.else_body.as_deref().map(|b| self.flatten(b)),
            },
            Operator::DoWhile(dw) => Node::DoWhile {
                body: self.flatten(&dw.body),
                cond: cond_node(&dw.condition),
            },
        };
        self.nodes.push(node);
        (self.nodes.len() - 1) as NodeId
    }
}

fn cond_node(c: &Condition) -> CondNode {
    CondNode {
        spec: Arc::new(c.stay.mask_spec(&c.true_waits.union(&c.false_waits))),
        stay: c.stay.clone(),
        true_waits: c.true_waits.clone(),
        false_waits: c.false_waits.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepOutcome {
    Advanced,
    Finished,
    Rejected,
}

/// Active operator plus its progress cursor: child index for `Sequence`,
/// position for `Write`, 0 = waiting / 1 = body for `Wait`, 0 = condition /
/// 1 = branch for `IfElse`, 0 = body / 1 = condition for `DoWhile`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Frame {
    node: NodeId,
    cursor: u32,
}

#[derive(Debug, Clone)]
pub struct MachineState {
    program: Arc<Program>,
    frames: Vec<Frame>,
    finished: bool,
    frame_ops: usize,
}

impl PartialEq for MachineState {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.program, &other.program) && self.frames == other.frames && self.finished == other.finished
    }
}

impl Eq for MachineState {}

impl Hash for MachineState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.frames.hash(state);
        self.finished.hash(state);
    }
}

impl MachineState {
    /// Validates `root` and positions a fresh machine at its first mask-emitting leaf.
    pub fn start(root: &Operator, vocab_size: usize) -> Result<Self, OperatorError> {
        Ok(Self::from_program(Program::new(root, vocab_size)?))
    }

    pub fn from_program(program: Arc<Program>) -> Self {
        let mut state = MachineState {
            frames: Vec::with_capacity(program.depth),
            program,
            finished: false,
            frame_ops: 0,
        };
        let root = state.program.root;
        state.enter(root);
        state.frame_ops = 0;
        state
    }

    pub fn program(&self) -> &Arc<Program> {
        &self.program
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Frame pushes plus pops performed by the most recent step.
    pub fn last_step_frame_ops(&self) -> usize {
        self.frame_ops
    }

    pub fn current_mask_spec(&self) -> Result<&Arc<MaskSpec>, OperatorError> {
        let top = self.frames.last().ok_or(OperatorError::Finished)?;
        Ok(match &self.program.nodes[top.node as usize] {
            Node::Write { specs, .. } => &specs[top.cursor as usize],
            Node::Wait { spec, .. } => spec,
            Node::IfElse { cond, .. } | Node::DoWhile { cond, .. } => &cond.spec,
            Node::Sequence(_) => unreachable!("sequence frame on top of stack"),
        })
    }

    pub fn step(&mut self, token: TokenId) -> Result<StepOutcome, OperatorError> {
        if self.finished {
            return Err(OperatorError::Finished);
        }
        let program = Arc::clone(&self.program);
        let size = program.vocab_size;
        let top = *self.frames.last().expect("live machine has frames");
        let mut ops = 0;
        let accepted = match &program.nodes[top.node as usize] {
            Node::Write { seq, .. } => {
                if seq[top.cursor as usize] != token {
                    return Ok(StepOutcome::Rejected);
                }
                let next = top.cursor + 1;
                if next as usize == seq.len() {
                    ops += self.complete();
                } else {
                    self.frames.last_mut().unwrap().cursor = next;
                }
                true
            }
            Node::Wait { stay, waits, body, .. } => {
                if waits.contains(token) {
                    match body {
                        Some(b) => {
                            self.frames.last_mut().unwrap().cursor = 1;
                            ops += self.enter(*b);
                        }
                        None => ops += self.complete(),
                    }
                    true
                } else {
                    stay.permits(token, size)
                }
            }
            Node::IfElse { cond, if_body, else_body } => match branch(cond, token, size) {
                Some(Some(taken)) => {
                    let target = if taken { if_body } else { else_body };
                    match target {
                        Some(b) => {
                            self.frames.last_mut().unwrap().cursor = 1;
                            ops += self.enter(*b);
                        }
                        None => ops += self.complete(),
                    }
                    true
                }
                Some(None) => true,
                None => false,
            },
            Node::DoWhile { body, cond } => match branch(cond, token, size) {
                Some(Some(true)) => {
                    self.frames.last_mut().unwrap().cursor = 0;
                    ops += self.enter(*body);
                    true
                }
                Some(Some(false)) => {
                    ops += self.complete();
                    true
                }
                Some(None) => true,
                None => false,
            },
            Node::Sequence(_) => unreachable!("sequence frame on top of stack"),
        };
        if !accepted {
            return Ok(StepOutcome::Rejected);
        }
        self.frame_ops = ops;
        Ok(if self.finished {
            StepOutcome::Finished
        } else {
            StepOutcome::Advanced
        })
    }

    // Pushes frames from `node` down to its first mask-emitting leaf.
    fn enter(&mut self, mut node: NodeId) -> usize {
        let mut pushes = 0;
        loop {
            self.frames.push(Frame { node, cursor: 0 });
            pushes += 1;
            match &self.program.nodes[node as usize] {
                Node::Sequence(children) => node = children[0],
                Node::DoWhile { body, .. } => node = *body,
                _ => return pushes,
            }
        }
    }

    // Pops the finished top frame and advances ancestors until a leaf is active.
    fn complete(&mut self) -> usize {
        let mut ops = 0;
        self.frames.pop();
        ops += 1;
        while let Some(parent) = self.frames.last_mut() {
            match &self.program.nodes[parent.node as usize] {
                Node::Sequence(children) => {
                    parent.cursor += 1;
                    if (parent.cursor as usize) < children.len() {
                        let next = children[parent.cursor as usize];
                        return ops + self.enter(next);
                    }
                }
                Node::DoWhile { .. } if parent.cursor == 0 => {
                    parent.cursor = 1;
                    return ops;
                }
                _ => {}
            }
            self.frames.pop();
            ops += 1;
        }
        self.finished = true;
        ops
    }
}

// Some(Some(b)) = triggered with value b, Some(None) = stay, None = reject.
fn branch(cond: &CondNode, token: TokenId, size: usize) -> Option<Option<bool>> {
    if cond.true_waits.contains(token) {
        Some(Some(true))
    } else if cond.false_waits.contains(token) {
        Some(Some(false))
    } else if cond.stay.permits(token, size) {
        Some(None)
    } else {
        None
    }
}
