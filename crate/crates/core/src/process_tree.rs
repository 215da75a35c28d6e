//! Process trees: model, textual notation and replay.
//!
//! Notation:
//!
//! ```text
//! tree  := label | "tau" | op "(" tree ("," tree)* ")"
//! op    := "->" | "X" | "+" | "*"
//! ```
//!
//! Labels are trimmed and may contain any character except `,`, `(` and `)`.
//! Labels that need those characters (or that would read as `tau`) are
//! written in double quotes with `\"` and `\\` escapes.
//!
//! Node ids are assigned in pre-order starting at 0 for the root. A loop with
//! more than two children is normalized to `*(do, X(redo1, ..., redoN))` when
//! built through [`ProcessTree::operator`] or [`parse`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Sequence,
    Xor,
    Parallel,
    Loop,
}

impl Operator {
    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Sequence => "->",
            Operator::Xor => "X",
            Operator::Parallel => "+",
            Operator::Loop => "*",
        }
    }

    fn from_symbol(s: &str) -> Option<Self> {
        match s {
            "->" => Some(Operator::Sequence),
            "X" => Some(Operator::Xor),
            "+" => Some(Operator::Parallel),
            "*" => Some(Operator::Loop),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProcessTree {
    Activity(String),
    Silent,
    Operator {
        op: Operator,
        children: Vec<ProcessTree>,
    },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("SyntaxError at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("ArityError: {0}")]
    Arity(String),
    #[error("InvalidLabel: `{0}`")]
    InvalidLabel(String),
}

impl TreeError {
    pub fn name(&self) -> &'static str {
        match self {
            TreeError::Syntax { .. } => "SyntaxError",
            TreeError::Arity(_) => "ArityError",
            TreeError::InvalidLabel(_) => "InvalidLabel",
        }
    }
}

/// A position in the tree, as returned by [`ProcessTree::nodes`].
#[derive(Debug, Clone, Copy)]
pub struct NodeRef<'a> {
    pub id: usize,
    pub parent: Option<usize>,
    pub child_index: usize,
    pub node: &'a ProcessTree,
}

/// An (operator, direct child) pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TreeEdge {
    pub parent_id: usize,
    pub child_index: usize,
    pub child_activity: Option<String>,
}

impl ProcessTree {
    pub fn activity(label: impl Into<String>) -> Self {
        ProcessTree::Activity(label.into())
    }

    /// Builds an operator node, checking arity and normalizing wide loops.
    pub fn operator(op: Operator, mut children: Vec<ProcessTree>) -> Result<Self, TreeError> {
        match op {
            Operator::Loop if children.len() < 2 => {
                return Err(TreeError::Arity(format!(
                    "loop needs at least 2 children, got {}",
                    children.len()
                )))
            }
            Operator::Loop if children.len() > 2 => {
                let redo = children.split_off(1);
                children.push(ProcessTree::Operator { op: Operator::Xor, children: redo });
            }
            _ if children.is_empty() => {
                return Err(TreeError::Arity(format!("{} needs at least 1 child", op.symbol())))
            }
            _ => {}
        }
        Ok(ProcessTree::Operator { op, children })
    }

    pub fn seq(children: Vec<ProcessTree>) -> Self {
        Self::operator(Operator::Sequence, children).expect("non-empty sequence")
    }

    pub fn xor(children: Vec<ProcessTree>) -> Self {
        Self::operator(Operator::Xor, children).expect("non-empty choice")
    }

    pub fn par(children: Vec<ProcessTree>) -> Self {
        Self::operator(Operator::Parallel, children).expect("non-empty parallel")
    }

    pub fn looped(children: Vec<ProcessTree>) -> Self {
        Self::operator(Operator::Loop, children).expect("loop with at least two children")
    }

    /// Checks the structural invariants: arities, normalized loops and
    /// representable labels.
    pub fn validate(&self) -> Result<(), TreeError> {
        match self {
            ProcessTree::Activity(a) => {
                if a.is_empty() {
                    return Err(TreeError::InvalidLabel(a.clone()));
                }
                Ok(())
            }
            ProcessTree::Silent => Ok(()),
            ProcessTree::Operator { op, children } => {
                match op {
                    Operator::Loop if children.len() != 2 => {
                        return Err(TreeError::Arity(format!(
                            "loop must have exactly 2 children after normalization, got {}",
                            children.len()
                        )))
                    }
                    _ if children.is_empty() => {
                        return Err(TreeError::Arity(format!("{} has no children", op.symbol())))
                    }
                    _ => {}
                }
                children.iter().try_for_each(ProcessTree::validate)
            }
        }
    }

    pub fn children(&self) -> &[ProcessTree] {
        match self {
            ProcessTree::Operator { children, .. } => children,
            _ => &[],
        }
    }

    pub fn op(&self) -> Option<Operator> {
        match self {
            ProcessTree::Operator { op, .. } => Some(*op),
            _ => None,
        }
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            ProcessTree::Activity(a) => Some(a),
            _ => None,
        }
    }

    /// All nodes in pre-order; `nodes()[i].id == i`.
    pub fn nodes(&self) -> Vec<NodeRef<'_>> {
        fn walk<'a>(t: &'a ProcessTree, parent: Option<usize>, child_index: usize, out: &mut Vec<NodeRef<'a>>) {
            let id = out.len();
            out.push(NodeRef { id, parent, child_index, node: t });
            for (i, c) in t.children().iter().enumerate() {
                walk(c, Some(id), i, out);
            }
        }
        let mut out = Vec::new();
        walk(self, None, 0, &mut out);
        out
    }

    pub fn node_count(&self) -> usize {
        1 + self.children().iter().map(ProcessTree::node_count).sum::<usize>()
    }

    pub fn node(&self, id: usize) -> Option<&ProcessTree> {
        self.nodes().get(id).map(|n| n.node)
    }

    /// Child-index path from the root to node `id`.
    pub fn path_of(&self, id: usize) -> Option<Vec<usize>> {
        let nodes = self.nodes();
        nodes.get(id)?;
        let mut path = Vec::new();
        let mut cur = id;
        while let Some(p) = nodes[cur].parent {
            path.push(nodes[cur].child_index);
            cur = p;
        }
        path.reverse();
        Some(path)
    }

    /// Returns a copy with node `id` replaced by `replacement`.
    pub fn replace_node(&self, id: usize, replacement: ProcessTree) -> Option<ProcessTree> {
        let path = self.path_of(id)?;
        let mut out = self.clone();
        let mut cur = &mut out;
        for i in path {
            match cur {
                ProcessTree::Operator { children, .. } => cur = &mut children[i],
                _ => unreachable!("path goes through operators"),
            }
        }
        *cur = replacement;
        Some(out)
    }

    /// Distinct activity labels in the leaves, sorted.
    pub fn activities(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for n in self.nodes() {
            if let ProcessTree::Activity(a) = n.node {
                out.insert(a.clone());
            }
        }
        out
    }
}

impl fmt::Display for ProcessTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessTree::Silent => f.write_str("tau"),
            ProcessTree::Activity(a) => write_label(f, a),
            ProcessTree::Operator { op, children } => {
                write!(f, "{}( ", op.symbol())?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(" )")
            }
        }
    }
}

fn needs_quotes(label: &str) -> bool {
    label == "tau"
        || label.trim() != label
        || label.starts_with('"')
        || label.contains([',', '(', ')'])
}

fn write_label(f: &mut fmt::Formatter<'_>, label: &str) -> fmt::Result {
    if !needs_quotes(label) {
        return f.write_str(label);
    }
    f.write_str("\"")?;
    for ch in label.chars() {
        if ch == '"' || ch == '\\' {
            f.write_str("\\")?;
        }
        write!(f, "{ch}")?;
    }
    f.write_str("\"")
}

pub fn serialize(tree: &ProcessTree) -> String {
    tree.to_string()
}

pub fn parse(text: &str) -> Result<ProcessTree, TreeError> {
    let mut p = Parser { src: text, pos: 0 };
    p.skip_ws();
    if p.pos == text.len() {
        return Err(p.error("empty input"));
    }
    let tree = p.tree()?;
    p.skip_ws();
    if p.pos != text.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(tree)
}

impl std::str::FromStr for ProcessTree {
    type Err = TreeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

impl Serialize for ProcessTree {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ProcessTree {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse(&text).map_err(serde::de::Error::custom)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> TreeError {
        TreeError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn tree(&mut self) -> Result<ProcessTree, TreeError> {
        self.skip_ws();
        if self.peek() == Some('"') {
            return self.quoted();
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if matches!(c, ',' | '(' | ')') {
                break;
            }
            self.pos += c.len_utf8();
        }
        let token = self.src[start..self.pos].trim();
        if self.peek() == Some('(') {
            let op = Operator::from_symbol(token).ok_or(TreeError::Syntax {
                offset: start,
                message: format!("unknown operator `{token}`"),
            })?;
            self.pos += 1;
            let mut children = vec![self.tree()?];
            loop {
                self.skip_ws();
                match self.peek() {
                    Some(',') => {
                        self.pos += 1;
                        children.push(self.tree()?);
                    }
                    Some(')') => {
                        self.pos += 1;
                        break;
                    }
                    _ => return Err(self.error("expected `,` or `)`")),
                }
            }
            return ProcessTree::operator(op, children);
        }
        match token {
            "" => Err(TreeError::Syntax {
                offset: start,
                message: "expected a label or operator".into(),
            }),
            "tau" => Ok(ProcessTree::Silent),
            label => Ok(ProcessTree::Activity(label.to_string())),
        }
    }

    fn quoted(&mut self) -> Result<ProcessTree, TreeError> {
        let start = self.pos;
        self.pos += 1;
        let mut label = String::new();
        loop {
            let Some(c) = self.peek() else {
                return Err(TreeError::Syntax {
                    offset: start,
                    message: "unterminated quoted label".into(),
                });
            };
            self.pos += c.len_utf8();
            match c {
                '"' => break,
                '\\' => {
                    let Some(e) = self.peek() else {
                        return Err(self.error("dangling escape"));
                    };
                    self.pos += e.len_utf8();
                    label.push(e);
                }
                c => label.push(c),
            }
        }
        if label.is_empty() {
            return Err(TreeError::Syntax {
                offset: start,
                message: "empty quoted label".into(),
            });
        }
        Ok(ProcessTree::Activity(label))
    }
}

/// Every (operator, direct child) pair of the tree.
pub fn edges(tree: &ProcessTree) -> BTreeSet<TreeEdge> {
    tree.nodes()
        .iter()
        .filter_map(|n| {
            let parent_id = n.parent?;
            Some(TreeEdge {
                parent_id,
                child_index: n.child_index,
                child_activity: n.node.label().map(str::to_string),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReplayResult {
    pub fits: bool,
    pub edge_usage: BTreeMap<TreeEdge, u64>,
    /// Redo count of every execution of each loop node, in execution order.
    pub loop_redo_counts: BTreeMap<usize, Vec<u32>>,
}

/// Flattened pre-order view of a tree shared by replay and simulation.
#[derive(Debug, Clone)]
pub(crate) struct FlatNode {
    pub kind: FlatKind,
    pub children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum FlatKind {
    Activity(String),
    Silent,
    Op(Operator),
}

pub(crate) fn flatten(tree: &ProcessTree) -> Vec<FlatNode> {
    let nodes = tree.nodes();
    let mut flat: Vec<FlatNode> = nodes
        .iter()
        .map(|n| FlatNode {
            kind: match n.node {
                ProcessTree::Activity(a) => FlatKind::Activity(a.clone()),
                ProcessTree::Silent => FlatKind::Silent,
                ProcessTree::Operator { op, .. } => FlatKind::Op(*op),
            },
            children: Vec::new(),
        })
        .collect();
    for n in &nodes {
        if let Some(p) = n.parent {
            flat[p].children.push(n.id);
        }
    }
    flat
}

/// Decides whether `sequence` is in the language of `tree` when every loop
/// execution performs at most `loop_cap` redos, and reports the parse with
/// the fewest total redos (ties go to the lowest choice index).
pub fn replay<S: AsRef<str>>(tree: &ProcessTree, sequence: &[S], loop_cap: u32) -> ReplayResult {
    let flat = flatten(tree);
    let mut labels: HashMap<&str, u32> = HashMap::new();
    for n in &flat {
        if let FlatKind::Activity(a) = &n.kind {
            let next = labels.len() as u32;
            labels.entry(a.as_str()).or_insert(next);
        }
    }
    let mut encoded = Vec::with_capacity(sequence.len());
    for s in sequence {
        match labels.get(s.as_ref()) {
            Some(&id) => encoded.push(id),
            None => return ReplayResult::default(),
        }
    }
    let mut replayer = Replayer::new(&flat, &labels, loop_cap);
    let Some(parse) = replayer.matches(0, &encoded) else {
        return ReplayResult::default();
    };
    let mut result = ReplayResult {
        fits: true,
        ..Default::default()
    };
    record(&flat, 0, &parse, &mut result);
    result
}

#[derive(Debug)]
struct Parse {
    redos: u64,
    derivation: Derivation,
}

#[derive(Debug)]
enum Derivation {
    Leaf,
    /// One parse per child, in child order (sequence and parallel).
    All(Vec<Rc<Parse>>),
    Choice(usize, Rc<Parse>),
    /// Alternating do/redo parts as (child index, parse).
    Loop(Vec<(usize, Rc<Parse>)>),
}

struct Replayer<'a> {
    flat: &'a [FlatNode],
    /// alphabet[node][label] is true when the node can emit the label.
    alphabet: Vec<Vec<bool>>,
    min_len: Vec<usize>,
    max_len: Vec<usize>,
    cap: u32,
    memo: HashMap<(usize, Vec<u32>), Option<Rc<Parse>>>,
}

/// Cost and redo segments of a loop-execution suffix.
type LoopTail = Option<(u64, Vec<(usize, Rc<Parse>)>)>;

impl<'a> Replayer<'a> {
    fn new(flat: &'a [FlatNode], labels: &HashMap<&str, u32>, cap: u32) -> Self {
        let n = flat.len();
        let mut alphabet = vec![vec![false; labels.len()]; n];
        let mut min_len = vec![0usize; n];
        let mut max_len = vec![0usize; n];
        for id in (0..n).rev() {
            let node = &flat[id];
            match &node.kind {
                FlatKind::Activity(a) => {
                    alphabet[id][labels[a.as_str()] as usize] = true;
                    min_len[id] = 1;
                    max_len[id] = 1;
                }
                FlatKind::Silent => {}
                FlatKind::Op(op) => {
                    for &c in &node.children {
                        for l in 0..labels.len() {
                            if alphabet[c][l] {
                                alphabet[id][l] = true;
                            }
                        }
                    }
                    let kids = node.children.iter();
                    match op {
                        Operator::Sequence | Operator::Parallel => {
                            min_len[id] = kids.clone().map(|&c| min_len[c]).sum();
                            max_len[id] = kids.fold(0usize, |acc, &c| acc.saturating_add(max_len[c]));
                        }
                        Operator::Xor => {
                            min_len[id] = kids.clone().map(|&c| min_len[c]).min().unwrap_or(0);
                            max_len[id] = kids.map(|&c| max_len[c]).max().unwrap_or(0);
                        }
                        Operator::Loop => {
                            let body = node.children[0];
                            let redo_max = node.children[1..].iter().map(|&c| max_len[c]).max().unwrap_or(0);
                            min_len[id] = min_len[body];
                            max_len[id] = max_len[body]
                                .saturating_mul(cap as usize + 1)
                                .saturating_add(redo_max.saturating_mul(cap as usize));
                        }
                    }
                }
            }
        }
        Self {
            flat,
            alphabet,
            min_len,
            max_len,
            cap,
            memo: HashMap::new(),
        }
    }

    fn feasible(&self, node: usize, seq: &[u32]) -> bool {
        seq.len() >= self.min_len[node]
            && seq.len() <= self.max_len[node]
            && seq.iter().all(|&l| self.alphabet[node][l as usize])
    }

    fn matches(&mut self, node: usize, seq: &[u32]) -> Option<Rc<Parse>> {
        if !self.feasible(node, seq) {
            return None;
        }
        let key = (node, seq.to_vec());
        if let Some(hit) = self.memo.get(&key) {
            return hit.clone();
        }
        let result = self.compute(node, seq).map(Rc::new);
        self.memo.insert(key, result.clone());
        result
    }

    fn compute(&mut self, node: usize, seq: &[u32]) -> Option<Parse> {
        let flat = self.flat;
        let children = &flat[node].children;
        match &flat[node].kind {
            // feasibility already pinned the length and alphabet
            FlatKind::Activity(_) | FlatKind::Silent => Some(Parse {
                redos: 0,
                derivation: Derivation::Leaf,
            }),
            FlatKind::Op(Operator::Xor) => {
                let mut best: Option<(usize, Rc<Parse>)> = None;
                for (i, &c) in children.iter().enumerate() {
                    if let Some(p) = self.matches(c, seq) {
                        if best.as_ref().is_none_or(|(_, b)| p.redos < b.redos) {
                            best = Some((i, p));
                        }
                    }
                }
                best.map(|(i, p)| Parse {
                    redos: p.redos,
                    derivation: Derivation::Choice(i, p),
                })
            }
            FlatKind::Op(Operator::Sequence) => self.sequence(children, seq),
            FlatKind::Op(Operator::Parallel) => self.parallel(children, seq),
            FlatKind::Op(Operator::Loop) => self.looped(children, seq),
        }
    }

    fn sequence(&mut self, children: &[usize], seq: &[u32]) -> Option<Parse> {
        let n = children.len();
        let m = seq.len();
        // best[k][i]: cheapest parse of children[k..] over seq[i..], as
        // (redos, split point, child parse)
        type Cell = Option<(u64, usize, Option<Rc<Parse>>)>;
        let mut best: Vec<Vec<Cell>> = vec![vec![None; m + 1]; n + 1];
        best[n][m] = Some((0, m, None));
        for k in (0..n).rev() {
            let c = children[k];
            for i in 0..=m {
                let mut cell: Cell = None;
                for j in i..=m {
                    let Some((rest, _, _)) = best[k + 1][j] else { continue };
                    if j - i > self.max_len[c] {
                        break;
                    }
                    if let Some(p) = self.matches(c, &seq[i..j]) {
                        let total = p.redos + rest;
                        if cell.as_ref().is_none_or(|(b, _, _)| total < *b) {
                            cell = Some((total, j, Some(p)));
                        }
                    }
                }
                best[k][i] = cell;
            }
        }
        let (redos, _, _) = best[0][0].clone()?;
        let mut parts = Vec::with_capacity(n);
        let mut i = 0;
        for row in best.iter().take(n) {
            let (_, j, p) = row[i].clone().expect("reconstructable");
            parts.push(p.expect("child parse"));
            i = j;
        }
        Some(Parse {
            redos,
            derivation: Derivation::All(parts),
        })
    }

    fn parallel(&mut self, children: &[usize], seq: &[u32]) -> Option<Parse> {
        let candidates: Vec<Vec<usize>> = seq
            .iter()
            .map(|&l| (0..children.len()).filter(|&k| self.alphabet[children[k]][l as usize]).collect())
            .collect();
        let mut assignment = vec![0usize; seq.len()];
        let mut counts = vec![0usize; children.len()];
        let mut best: Option<Parse> = None;
        self.assign(children, seq, &candidates, 0, &mut assignment, &mut counts, &mut best);
        best
    }

    #[allow(clippy::too_many_arguments)]
    fn assign(
        &mut self,
        children: &[usize],
        seq: &[u32],
        candidates: &[Vec<usize>],
        pos: usize,
        assignment: &mut Vec<usize>,
        counts: &mut Vec<usize>,
        best: &mut Option<Parse>,
    ) {
        if best.as_ref().is_some_and(|b| b.redos == 0) {
            return;
        }
        if pos == seq.len() {
            if children.iter().zip(counts.iter()).any(|(&c, &n)| n < self.min_len[c]) {
                return;
            }
            let mut parts = Vec::with_capacity(children.len());
            let mut redos = 0;
            for (k, &c) in children.iter().enumerate() {
                let sub: Vec<u32> = seq
                    .iter()
                    .zip(assignment.iter())
                    .filter(|(_, &a)| a == k)
                    .map(|(&l, _)| l)
                    .collect();
                match self.matches(c, &sub) {
                    Some(p) => {
                        redos += p.redos;
                        parts.push(p);
                    }
                    None => return,
                }
            }
            if best.as_ref().is_none_or(|b| redos < b.redos) {
                *best = Some(Parse {
                    redos,
                    derivation: Derivation::All(parts),
                });
            }
            return;
        }
        for &k in &candidates[pos] {
            if counts[k] >= self.max_len[children[k]] {
                continue;
            }
            assignment[pos] = k;
            counts[k] += 1;
            self.assign(children, seq, candidates, pos + 1, assignment, counts, best);
            counts[k] -= 1;
        }
    }

    fn looped(&mut self, children: &[usize], seq: &[u32]) -> Option<Parse> {
        let mut memo = HashMap::new();
        let (redos, parts) = self.loop_from(children, seq, 0, 0, &mut memo)?;
        Some(Parse {
            redos,
            derivation: Derivation::Loop(parts),
        })
    }

    /// Cheapest way to finish a loop execution from `start`, expecting the
    /// do-part next, after `done` redos.
    fn loop_from(
        &mut self,
        children: &[usize],
        seq: &[u32],
        start: usize,
        done: u32,
        memo: &mut HashMap<(usize, u32), LoopTail>,
    ) -> LoopTail {
        if let Some(hit) = memo.get(&(start, done)) {
            return hit.clone();
        }
        let m = seq.len();
        let body = children[0];
        let mut best: LoopTail = None;
        for j in start..=m {
            if j - start > self.max_len[body] {
                break;
            }
            let Some(do_part) = self.matches(body, &seq[start..j]) else { continue };
            if j == m {
                let cost = do_part.redos;
                if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    best = Some((cost, vec![(0, do_part.clone())]));
                }
                continue;
            }
            if done >= self.cap {
                continue;
            }
            for (r, &redo) in children.iter().enumerate().skip(1) {
                for k in j..=m {
                    if k - j > self.max_len[redo] {
                        break;
                    }
                    if k == j && j == start {
                        // an empty round makes no progress and only adds redos
                        continue;
                    }
                    let Some(redo_part) = self.matches(redo, &seq[j..k]) else { continue };
                    let Some((rest, tail)) = self.loop_from(children, seq, k, done + 1, memo) else {
                        continue;
                    };
                    let cost = do_part.redos + redo_part.redos + 1 + rest;
                    if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                        let mut parts = vec![(0, do_part.clone()), (r, redo_part)];
                        parts.extend(tail);
                        best = Some((cost, parts));
                    }
                }
            }
        }
        memo.insert((start, done), best.clone());
        best
    }
}

fn record(flat: &[FlatNode], node: usize, parse: &Parse, out: &mut ReplayResult) {
    let children = &flat[node].children;
    let use_edge = |out: &mut ReplayResult, k: usize| {
        let child = children[k];
        let edge = TreeEdge {
            parent_id: node,
            child_index: k,
            child_activity: match &flat[child].kind {
                FlatKind::Activity(a) => Some(a.clone()),
                _ => None,
            },
        };
        *out.edge_usage.entry(edge).or_insert(0) += 1;
    };
    match &parse.derivation {
        Derivation::Leaf => {}
        Derivation::All(parts) => {
            for (k, p) in parts.iter().enumerate() {
                use_edge(out, k);
                record(flat, children[k], p, out);
            }
        }
        Derivation::Choice(k, p) => {
            use_edge(out, *k);
            record(flat, children[*k], p, out);
        }
        Derivation::Loop(parts) => {
            let redos = parts.iter().filter(|(k, _)| *k != 0).count() as u32;
            out.loop_redo_counts.entry(node).or_default().push(redos);
            for (k, p) in parts {
                use_edge(out, *k);
                record(flat, children[*k], p, out);
            }
        }
    }
}
