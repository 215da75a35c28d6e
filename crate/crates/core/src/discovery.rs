//! Basic inductive-miner discovery.
//!
//! The log is recursively split by the first applicable cut of its
//! directly-follows graph (choice, sequence, parallel, loop). Sub-logs that
//! admit no cut become a flower loop `*(tau, X(a1, ..., ak))`. Every trace of
//! the input log fits the resulting tree.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::event_log::{variants, EventLog, LogError, Variant, VariantDistribution};
use crate::process_tree::{Operator, ProcessTree};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DirectlyFollowsGraph {
    pub nodes: BTreeSet<String>,
    pub arcs: BTreeMap<(String, String), u64>,
    pub start_activities: BTreeMap<String, u64>,
    pub end_activities: BTreeMap<String, u64>,
}

impl DirectlyFollowsGraph {
    fn from_sequences<'a>(log: impl IntoIterator<Item = (&'a Variant, u64)>) -> Self {
        let mut dfg = DirectlyFollowsGraph::default();
        for (trace, count) in log {
            let (Some(first), Some(last)) = (trace.first(), trace.last()) else { continue };
            *dfg.start_activities.entry(first.clone()).or_insert(0) += count;
            *dfg.end_activities.entry(last.clone()).or_insert(0) += count;
            dfg.nodes.extend(trace.iter().cloned());
            for w in trace.windows(2) {
                *dfg.arcs.entry((w[0].clone(), w[1].clone())).or_insert(0) += count;
            }
        }
        dfg
    }
}

pub fn build_dfg(dist: &VariantDistribution) -> DirectlyFollowsGraph {
    DirectlyFollowsGraph::from_sequences(dist.counts().iter().map(|(v, &c)| (v, c)))
}

/// A partition of the activities together with the operator that joins the
/// parts. Parts are in child order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cut {
    pub op: Operator,
    pub parts: Vec<BTreeSet<String>>,
}

/// Index-based view of a DFG used by the cut detectors.
struct Graph {
    names: Vec<String>,
    succ: Vec<Vec<bool>>,
    start: Vec<bool>,
    end: Vec<bool>,
}

impl Graph {
    fn new(dfg: &DirectlyFollowsGraph) -> Self {
        let names: Vec<String> = dfg.nodes.iter().cloned().collect();
        let idx = |a: &str| names.binary_search_by(|n| n.as_str().cmp(a)).expect("arc endpoint is a node");
        let n = names.len();
        let mut succ = vec![vec![false; n]; n];
        for (a, b) in dfg.arcs.keys() {
            succ[idx(a)][idx(b)] = true;
        }
        let start = names.iter().map(|a| dfg.start_activities.contains_key(a)).collect();
        let end = names.iter().map(|a| dfg.end_activities.contains_key(a)).collect();
        Self { names, succ, start, end }
    }

    fn len(&self) -> usize {
        self.names.len()
    }

    fn parts(&self, groups: Vec<Vec<usize>>) -> Vec<BTreeSet<String>> {
        groups
            .into_iter()
            .map(|g| g.into_iter().map(|i| self.names[i].clone()).collect())
            .collect()
    }

    /// Transitive closure (paths of length ≥ 1).
    fn reachability(&self) -> Vec<Vec<bool>> {
        let n = self.len();
        let mut reach = self.succ.clone();
        for k in 0..n {
            for i in 0..n {
                if reach[i][k] {
                    for j in 0..n {
                        if reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }
        reach
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.0[root] != root {
            root = self.0[root];
        }
        let mut cur = x;
        while self.0[cur] != root {
            let next = self.0[cur];
            self.0[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so groups order by first member
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }

    /// Groups of the given members, ordered by their smallest member.
    fn groups(&mut self, members: impl IntoIterator<Item = usize>) -> Vec<Vec<usize>> {
        let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for m in members {
            let r = self.find(m);
            by_root.entry(r).or_default().push(m);
        }
        let mut groups: Vec<Vec<usize>> = by_root.into_values().collect();
        groups.sort_by_key(|g| g[0]);
        groups
    }
}

/// Tries the cuts in order choice, sequence, parallel, loop and returns the
/// first one with at least two parts.
pub fn find_cut(dfg: &DirectlyFollowsGraph) -> Option<Cut> {
    let g = Graph::new(dfg);
    if g.len() < 2 {
        return None;
    }
    xor_cut(&g)
        .or_else(|| sequence_cut(&g))
        .or_else(|| parallel_cut(&g))
        .or_else(|| loop_cut(&g))
}

fn xor_cut(g: &Graph) -> Option<Cut> {
    let n = g.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in 0..n {
            if g.succ[i][j] {
                uf.union(i, j);
            }
        }
    }
    let groups = uf.groups(0..n);
    (groups.len() >= 2).then(|| Cut {
        op: Operator::Xor,
        parts: g.parts(groups),
    })
}

fn sequence_cut(g: &Graph) -> Option<Cut> {
    let n = g.len();
    let reach = g.reachability();
    let mut uf = UnionFind::new(n);
    // strongly connected pairs and pairs unreachable both ways share a part
    for i in 0..n {
        for j in (i + 1)..n {
            if reach[i][j] == reach[j][i] {
                uf.union(i, j);
            }
        }
    }
    let mut groups = uf.groups(0..n);
    if groups.len() < 2 {
        return None;
    }
    // earlier parts reach more of the graph
    let reach_count = |grp: &[usize]| (0..n).filter(|&b| grp.iter().any(|&a| reach[a][b] && !grp.contains(&b))).count();
    groups.sort_by(|x, y| reach_count(y).cmp(&reach_count(x)).then(x[0].cmp(&y[0])));
    for (i, x) in groups.iter().enumerate() {
        for y in &groups[i + 1..] {
            let ordered = x.iter().all(|&a| y.iter().all(|&b| reach[a][b] && !reach[b][a]));
            if !ordered {
                return None;
            }
        }
    }
    Some(Cut {
        op: Operator::Sequence,
        parts: g.parts(groups),
    })
}

fn parallel_cut(g: &Graph) -> Option<Cut> {
    let n = g.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if !(g.succ[i][j] && g.succ[j][i]) {
                uf.union(i, j);
            }
        }
    }
    let groups = uf.groups(0..n);
    let complete = |grp: &[usize]| grp.iter().any(|&a| g.start[a]) && grp.iter().any(|&a| g.end[a]);
    let (mut full, partial): (Vec<Vec<usize>>, Vec<Vec<usize>>) = groups.into_iter().partition(|grp| complete(grp));
    if full.is_empty() {
        return None;
    }
    for grp in partial {
        full[0].extend(grp);
    }
    if full.len() < 2 {
        return None;
    }
    for grp in &mut full {
        grp.sort_unstable();
    }
    full.sort_by_key(|grp| grp[0]);
    Some(Cut {
        op: Operator::Parallel,
        parts: g.parts(full),
    })
}

fn loop_cut(g: &Graph) -> Option<Cut> {
    let n = g.len();
    let mut in_do: Vec<bool> = (0..n).map(|i| g.start[i] || g.end[i]).collect();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in 0..n {
            if g.succ[i][j] && !in_do[i] && !in_do[j] {
                uf.union(i, j);
            }
        }
    }
    let rest: Vec<usize> = (0..n).filter(|&i| !in_do[i]).collect();
    let mut redo_parts = Vec::new();
    for comp in uf.groups(rest) {
        // redo parts are entered only from end activities and left only
        // towards start activities
        let bad_entry = (0..n).any(|x| in_do[x] && !g.end[x] && comp.iter().any(|&c| g.succ[x][c]));
        let bad_exit = (0..n).any(|y| in_do[y] && !g.start[y] && comp.iter().any(|&c| g.succ[c][y]));
        if bad_entry || bad_exit {
            for &c in &comp {
                in_do[c] = true;
            }
        } else {
            redo_parts.push(comp);
        }
    }
    if redo_parts.is_empty() {
        return None;
    }
    let mut groups = vec![(0..n).filter(|&i| in_do[i]).collect::<Vec<_>>()];
    groups.extend(redo_parts);
    Some(Cut {
        op: Operator::Loop,
        parts: g.parts(groups),
    })
}

type SubLog = BTreeMap<Variant, u64>;

fn split(log: &SubLog, cut: &Cut) -> Vec<SubLog> {
    let part_of = |a: &String| cut.parts.iter().position(|p| p.contains(a)).expect("activity in some part");
    let mut out = vec![SubLog::new(); cut.parts.len()];
    for (trace, &count) in log {
        match cut.op {
            Operator::Xor => {
                let k = part_of(&trace[0]);
                *out[k].entry(trace.clone()).or_insert(0) += count;
            }
            Operator::Sequence | Operator::Parallel => {
                for (k, sub) in out.iter_mut().enumerate() {
                    let projected: Variant = trace.iter().filter(|a| part_of(a) == k).cloned().collect();
                    *sub.entry(projected).or_insert(0) += count;
                }
            }
            Operator::Loop => {
                let mut start = 0;
                while start < trace.len() {
                    let k = part_of(&trace[start]);
                    let mut end = start + 1;
                    while end < trace.len() && part_of(&trace[end]) == k {
                        end += 1;
                    }
                    *out[k].entry(trace[start..end].to_vec()).or_insert(0) += count;
                    start = end;
                }
            }
        }
    }
    out
}

fn mine(log: &SubLog) -> ProcessTree {
    let non_empty: SubLog = log
        .iter()
        .filter(|(t, _)| !t.is_empty())
        .map(|(t, &c)| (t.clone(), c))
        .collect();
    if non_empty.is_empty() {
        return ProcessTree::Silent;
    }
    if non_empty.len() < log.len() {
        return ProcessTree::xor(vec![ProcessTree::Silent, mine(&non_empty)]);
    }
    let dfg = DirectlyFollowsGraph::from_sequences(log.iter().map(|(t, &c)| (t, c)));
    if dfg.nodes.len() == 1 {
        let a = dfg.nodes.iter().next().expect("one node").clone();
        return if log.keys().all(|t| t.len() == 1) {
            ProcessTree::Activity(a)
        } else {
            ProcessTree::looped(vec![ProcessTree::Activity(a), ProcessTree::Silent])
        };
    }
    match find_cut(&dfg) {
        Some(cut) => {
            let children = split(log, &cut).iter().map(mine).collect();
            ProcessTree::operator(cut.op, children).expect("cuts have at least two parts")
        }
        None => {
            let mut children = vec![ProcessTree::Silent];
            children.extend(dfg.nodes.iter().cloned().map(ProcessTree::Activity));
            ProcessTree::looped(children)
        }
    }
}

/// Discovers a process tree in which every trace of the distribution fits.
pub fn discover_from_variants(dist: &VariantDistribution) -> ProcessTree {
    mine(dist.counts())
}

pub fn discover(log: &EventLog) -> Result<ProcessTree, LogError> {
    Ok(discover_from_variants(&variants(log)?))
}
