//! Simulation-model estimation: a process tree enriched with choice weights,
//! loop parameters, activity durations, arrival rate, organizations and a
//! calendar, all estimated from an event log and editable through
//! [`ParameterPatch`]es.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::event_log::{variants, EventLog, LogError, VariantDistribution};
use crate::process_tree::{replay, Operator, ProcessTree, ReplayResult, TreeEdge, TreeError};

/// Share of events a daily window must cover to be taken as business hours.
pub const BUSINESS_HOURS_COVERAGE: f64 = 0.95;
/// Longest daily window still taken as business hours; with 24 hourly
/// buckets any uniform log has a 23-hour window above the coverage share.
pub const BUSINESS_HOURS_MAX_SPAN: usize = 20;
/// Minimum Jaccard index of two activities' resource sets to share an org.
pub const ORG_JACCARD_THRESHOLD: f64 = 0.5;
/// Name of the single organization of a log without resources.
pub const DEFAULT_ORG: &str = "default";

const HOUR_MS: i64 = 3_600_000;
const DAY_MS: i64 = 24 * HOUR_MS;

#[derive(Debug, Error)]
pub enum EnrichError {
    #[error("NoFittingTraces: no trace of the log fits the tree")]
    NoFittingTraces,
    #[error("SingleCase: arrival estimation needs at least two cases")]
    SingleCase,
    #[error("UnknownTarget: {0}")]
    UnknownTarget(String),
    #[error("InvariantViolation: {invariant} ({detail})")]
    InvariantViolation { invariant: &'static str, detail: String },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl EnrichError {
    pub fn name(&self) -> &'static str {
        match self {
            EnrichError::NoFittingTraces => "NoFittingTraces",
            EnrichError::SingleCase => "SingleCase",
            EnrichError::UnknownTarget(_) => "UnknownTarget",
            EnrichError::InvariantViolation { .. } => "InvariantViolation",
            EnrichError::Log(e) => e.name(),
            EnrichError::Tree(e) => e.name(),
        }
    }
}

fn violation(invariant: &'static str, detail: impl Into<String>) -> EnrichError {
    EnrichError::InvariantViolation {
        invariant,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    /// Probability of another redo after each body completion.
    pub redo_probability: f64,
    pub max_redos: u32,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            redo_probability: 0.0,
            max_redos: 1,
        }
    }
}

/// Duration statistics in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivityStats {
    pub mean_duration: f64,
    pub std_duration: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Organization {
    pub resources: BTreeSet<String>,
    pub capacity: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalKind {
    /// Exponential interarrival times with the configured mean.
    #[default]
    Exponential,
    /// Every interarrival time equals the configured mean.
    Fixed,
}

/// A weekly window: `weekday` 0 is Monday, hours are UTC, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkWindow {
    pub weekday: u8,
    pub start_hour: u8,
    pub end_hour: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BusinessHours {
    #[default]
    Always,
    Weekly { windows: Vec<WorkWindow> },
}

/// Monday-based weekday of an epoch-millisecond instant (1970-01-01 was a
/// Thursday).
pub fn weekday(millis: i64) -> u8 {
    (millis.div_euclid(DAY_MS) + 3).rem_euclid(7) as u8
}

pub fn hour_of_day(millis: i64) -> u8 {
    (millis.rem_euclid(DAY_MS) / HOUR_MS) as u8
}

impl BusinessHours {
    pub fn weekdays(start_hour: u8, end_hour: u8) -> Self {
        BusinessHours::Weekly {
            windows: (0..5)
                .map(|weekday| WorkWindow {
                    weekday,
                    start_hour,
                    end_hour,
                })
                .collect(),
        }
    }

    /// Earliest instant ≥ `t` inside a window.
    pub fn next_open(&self, t: i64) -> i64 {
        let BusinessHours::Weekly { windows } = self else { return t };
        let mut sorted = windows.clone();
        sorted.sort_by_key(|w| (w.weekday, w.start_hour));
        let today = t.div_euclid(DAY_MS) * DAY_MS;
        for d in 0..=7 {
            let day = today + d * DAY_MS;
            let wd = weekday(day);
            for w in sorted.iter().filter(|w| w.weekday == wd) {
                let open = day + i64::from(w.start_hour) * HOUR_MS;
                let close = day + i64::from(w.end_hour) * HOUR_MS;
                if t < close {
                    return t.max(open);
                }
            }
        }
        t
    }

    pub fn is_open(&self, t: i64) -> bool {
        self.next_open(t) == t
    }
}

/// A half-open `[start, end)` interval in epoch milliseconds during which no
/// activity may start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interruption {
    pub start: i64,
    pub end: i64,
}

/// The simulation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedTree {
    pub tree: ProcessTree,
    /// XOR node id → weight of each child, in child order.
    pub xor_weights: BTreeMap<usize, Vec<f64>>,
    pub loop_params: BTreeMap<usize, LoopParams>,
    pub activity_stats: BTreeMap<String, ActivityStats>,
    /// Mean interarrival time of cases, seconds.
    pub arrival: f64,
    #[serde(default)]
    pub arrival_kind: ArrivalKind,
    pub organizations: BTreeMap<String, Organization>,
    pub activity_org: BTreeMap<String, String>,
    /// Source org → target org → share of directly-follows pairs.
    pub handover: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub business_hours: BusinessHours,
    #[serde(default)]
    pub process_capacity: Option<u32>,
    #[serde(default)]
    pub interruptions: Vec<Interruption>,
}

impl EnrichedTree {
    /// Weight of an edge: the XOR weight for children of a choice, 1
    /// otherwise.
    pub fn edge_weight(&self, edge: &TreeEdge) -> f64 {
        self.xor_weights
            .get(&edge.parent_id)
            .and_then(|w| w.get(edge.child_index))
            .copied()
            .unwrap_or(1.0)
    }

    /// Earliest instant ≥ `t` at which an activity may start.
    pub fn next_start_allowed(&self, mut t: i64) -> i64 {
        // each pass moves forward, so a handful of passes settle any overlap
        for _ in 0..10_000 {
            let open = self.business_hours.next_open(t);
            let resumed = self
                .interruptions
                .iter()
                .filter(|i| i.start <= open && open < i.end)
                .map(|i| i.end)
                .max()
                .unwrap_or(open);
            if resumed == t {
                return t;
            }
            t = resumed;
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnrichError> {
        let model: EnrichedTree =
            serde_json::from_str(text).map_err(|e| violation("model JSON is well-formed", e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    /// Checks every model invariant, naming the first one violated.
    pub fn validate(&self) -> Result<(), EnrichError> {
        self.tree
            .validate()
            .map_err(|e| violation("tree is well-formed", e.to_string()))?;
        let nodes = self.tree.nodes();
        for n in &nodes {
            match n.node.op() {
                Some(Operator::Xor) => {
                    let Some(w) = self.xor_weights.get(&n.id) else {
                        return Err(violation("xor weights cover every choice", format!("node {}", n.id)));
                    };
                    if w.len() != n.node.children().len() {
                        return Err(violation(
                            "xor weights cover every choice",
                            format!("node {} has {} children but {} weights", n.id, n.node.children().len(), w.len()),
                        ));
                    }
                    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                        return Err(violation("xor weight ≥ 0", format!("node {}", n.id)));
                    }
                    let sum: f64 = w.iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(violation("xor weights sum to 1", format!("node {} sums to {sum}", n.id)));
                    }
                }
                Some(Operator::Loop) => {
                    let Some(p) = self.loop_params.get(&n.id) else {
                        return Err(violation("loop params cover every loop", format!("node {}", n.id)));
                    };
                    if !(0.0..1.0).contains(&p.redo_probability) {
                        return Err(violation("redo_probability in [0,1)", format!("node {}", n.id)));
                    }
                    if p.max_redos < 1 {
                        return Err(violation("max_redos ≥ 1", format!("node {}", n.id)));
                    }
                }
                _ => {}
            }
        }
        let is_op = |id: usize, op: Operator| nodes.get(id).and_then(|n| n.node.op()) == Some(op);
        if let Some(id) = self.xor_weights.keys().find(|&&id| !is_op(id, Operator::Xor)) {
            return Err(violation("xor weights keyed by choice nodes", format!("node {id}")));
        }
        if let Some(id) = self.loop_params.keys().find(|&&id| !is_op(id, Operator::Loop)) {
            return Err(violation("loop params keyed by loop nodes", format!("node {id}")));
        }
        for (a, s) in &self.activity_stats {
            if !s.mean_duration.is_finite() || s.mean_duration < 0.0 {
                return Err(violation("mean_duration ≥ 0", a.clone()));
            }
            if !s.std_duration.is_finite() || s.std_duration < 0.0 {
                return Err(violation("std_duration ≥ 0", a.clone()));
            }
        }
        if !self.arrival.is_finite() || self.arrival <= 0.0 {
            return Err(violation("arrival > 0", self.arrival.to_string()));
        }
        for a in self.tree.activities() {
            if !self.activity_stats.contains_key(&a) {
                return Err(violation("every activity has stats", a));
            }
            if !self.activity_org.contains_key(&a) {
                return Err(violation("every activity has an org", a));
            }
        }
        for (a, o) in &self.activity_org {
            if !self.organizations.contains_key(o) {
                return Err(violation("activity org exists", format!("{a} → {o}")));
            }
        }
        for (name, org) in &self.organizations {
            if org.capacity < 1 {
                return Err(violation("capacity ≥ 1", name.clone()));
            }
        }
        for (from, row) in &self.handover {
            let mut sum = 0.0;
            for (to, p) in row {
                if !self.organizations.contains_key(from) || !self.organizations.contains_key(to) {
                    return Err(violation("handover orgs exist", format!("{from} → {to}")));
                }
                if !p.is_finite() || !(0.0..=1.0).contains(p) {
                    return Err(violation("handover probability in [0,1]", format!("{from} → {to}")));
                }
                sum += p;
            }
            if sum > 1.0 + 1e-9 {
                return Err(violation("handover rows sum to ≤ 1", from.clone()));
            }
        }
        if let BusinessHours::Weekly { windows } = &self.business_hours {
            if windows.is_empty() {
                return Err(violation("business hours have a window", "empty window list"));
            }
            for w in windows {
                if w.weekday > 6 || w.start_hour >= w.end_hour || w.end_hour > 24 {
                    return Err(violation("business hours windows are valid", format!("{w:?}")));
                }
            }
        }
        if self.process_capacity == Some(0) {
            return Err(violation("process_capacity ≥ 1", "0"));
        }
        for i in &self.interruptions {
            if i.start >= i.end {
                return Err(violation("interruption start < end", format!("{i:?}")));
            }
        }
        Ok(())
    }
}

/// Replays every variant once; returns fitting replays with multiplicities.
fn replay_fitting(tree: &ProcessTree, dist: &VariantDistribution) -> Result<Vec<(ReplayResult, u64)>, EnrichError> {
    let cap = dist.counts().keys().map(Vec::len).max().unwrap_or(1).max(1) as u32;
    let fitting: Vec<_> = dist
        .counts()
        .iter()
        .map(|(v, &c)| (replay(tree, v, cap), c))
        .filter(|(r, _)| r.fits)
        .collect();
    if fitting.is_empty() {
        return Err(EnrichError::NoFittingTraces);
    }
    Ok(fitting)
}

fn xor_weights_from(tree: &ProcessTree, replays: &[(ReplayResult, u64)]) -> BTreeMap<usize, Vec<f64>> {
    let mut out = BTreeMap::new();
    for n in tree.nodes() {
        if n.node.op() != Some(Operator::Xor) {
            continue;
        }
        let k = n.node.children().len();
        let mut usage = vec![0u64; k];
        for (r, count) in replays {
            for (edge, used) in r.edge_usage.range(edge_range(n.id)) {
                usage[edge.child_index] += used * count;
            }
        }
        let total: u64 = usage.iter().sum();
        let weights = if total == 0 {
            vec![1.0 / k as f64; k]
        } else {
            usage.iter().map(|&u| u as f64 / total as f64).collect()
        };
        out.insert(n.id, weights);
    }
    out
}

fn edge_range(parent_id: usize) -> std::ops::Range<TreeEdge> {
    let lo = TreeEdge {
        parent_id,
        child_index: 0,
        child_activity: None,
    };
    let hi = TreeEdge {
        parent_id: parent_id + 1,
        child_index: 0,
        child_activity: None,
    };
    lo..hi
}

fn loop_params_from(tree: &ProcessTree, replays: &[(ReplayResult, u64)]) -> BTreeMap<usize, LoopParams> {
    let mut out = BTreeMap::new();
    for n in tree.nodes() {
        if n.node.op() != Some(Operator::Loop) {
            continue;
        }
        let (mut executions, mut redos, mut max_seen) = (0u64, 0u64, 0u32);
        for (r, count) in replays {
            for &c in r.loop_redo_counts.get(&n.id).map(Vec::as_slice).unwrap_or(&[]) {
                executions += count;
                redos += u64::from(c) * count;
                max_seen = max_seen.max(c);
            }
        }
        let params = if redos == 0 {
            LoopParams::default()
        } else {
            LoopParams {
                redo_probability: redos as f64 / (executions + redos) as f64,
                max_redos: max_seen,
            }
        };
        out.insert(n.id, params);
    }
    out
}

/// Choice weights as usage ratios over the replays of the fitting traces;
/// choices never reached get uniform weights.
pub fn estimate_xor_weights(tree: &ProcessTree, log: &EventLog) -> Result<BTreeMap<usize, Vec<f64>>, EnrichError> {
    let replays = replay_fitting(tree, &variants(log)?)?;
    Ok(xor_weights_from(tree, &replays))
}

/// Per loop: the largest observed redo count and the redo probability
/// `redos / (executions + redos)`.
pub fn estimate_loop_params(tree: &ProcessTree, log: &EventLog) -> Result<BTreeMap<usize, LoopParams>, EnrichError> {
    let replays = replay_fitting(tree, &variants(log)?)?;
    Ok(loop_params_from(tree, &replays))
}

/// Duration of an event = time since the previous event of its trace. Mean
/// and population standard deviation per activity (Welford's update).
pub fn estimate_activity_stats(log: &EventLog) -> BTreeMap<String, ActivityStats> {
    struct Acc {
        n: u64,
        mean: f64,
        m2: f64,
    }
    let mut acc: BTreeMap<&str, Acc> = BTreeMap::new();
    for trace in log.traces() {
        let events = trace.events();
        for (i, e) in events.iter().enumerate() {
            let a = acc.entry(e.activity.as_str()).or_insert(Acc { n: 0, mean: 0.0, m2: 0.0 });
            if i == 0 {
                continue;
            }
            let x = (e.timestamp - events[i - 1].timestamp) as f64 / 1000.0;
            a.n += 1;
            let delta = x - a.mean;
            a.mean += delta / a.n as f64;
            a.m2 += delta * (x - a.mean);
        }
    }
    acc.into_iter()
        .map(|(a, s)| {
            let stats = if s.n == 0 {
                ActivityStats::default()
            } else {
                ActivityStats {
                    mean_duration: s.mean,
                    std_duration: (s.m2 / s.n as f64).max(0.0).sqrt(),
                }
            };
            (a.to_string(), stats)
        })
        .collect()
}

/// Mean gap in seconds between consecutive case starts.
pub fn estimate_arrival(log: &EventLog) -> Result<f64, EnrichError> {
    let mut starts: Vec<i64> = log
        .traces()
        .iter()
        .filter_map(|t| t.events().first().map(|e| e.timestamp))
        .collect();
    if starts.len() < 2 {
        return Err(EnrichError::SingleCase);
    }
    starts.sort_unstable();
    let span = (starts[starts.len() - 1] - starts[0]) as f64 / 1000.0;
    Ok(span / (starts.len() - 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OrganizationModel {
    pub organizations: BTreeMap<String, Organization>,
    pub activity_org: BTreeMap<String, String>,
    pub handover: BTreeMap<String, BTreeMap<String, f64>>,
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Groups activities whose performer sets overlap (Jaccard ≥ 0.5, closed
/// transitively) into organizations `org_1, org_2, …` ordered by their
/// first activity, and measures hand-over between them.
pub fn discover_organizations(log: &EventLog) -> OrganizationModel {
    let mut performers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for e in log.events() {
        performers.entry(e.activity.clone()).or_default().insert(e.resource.clone());
    }
    let resourceless = performers.values().all(|r| r.iter().all(String::is_empty));
    let mut model = OrganizationModel::default();
    if resourceless {
        model.organizations.insert(
            DEFAULT_ORG.to_string(),
            Organization {
                resources: BTreeSet::new(),
                capacity: log.len().max(1) as u32,
            },
        );
        for a in performers.keys() {
            model.activity_org.insert(a.clone(), DEFAULT_ORG.to_string());
        }
    } else {
        let acts: Vec<&String> = performers.keys().collect();
        let mut group: Vec<usize> = (0..acts.len()).collect();
        fn root(group: &mut [usize], mut x: usize) -> usize {
            while group[x] != x {
                group[x] = group[group[x]];
                x = group[x];
            }
            x
        }
        for i in 0..acts.len() {
            for j in (i + 1)..acts.len() {
                if jaccard(&performers[acts[i]], &performers[acts[j]]) >= ORG_JACCARD_THRESHOLD {
                    let (ri, rj) = (root(&mut group, i), root(&mut group, j));
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    group[hi] = lo;
                }
            }
        }
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        for i in 0..acts.len() {
            let r = root(&mut group, i);
            let next = names.len() + 1;
            let name = names.entry(r).or_insert_with(|| format!("org_{next}")).clone();
            let org = model.organizations.entry(name.clone()).or_default();
            org.resources.extend(performers[acts[i]].iter().cloned());
            model.activity_org.insert(acts[i].clone(), name);
        }
        for org in model.organizations.values_mut() {
            org.capacity = org.resources.len() as u32;
        }
    }
    let mut pairs: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    for trace in log.traces() {
        for w in trace.events().windows(2) {
            let from = model.activity_org[&w[0].activity].as_str();
            let to = model.activity_org[&w[1].activity].as_str();
            *pairs.entry(from).or_default().entry(to).or_insert(0) += 1;
        }
    }
    for (from, row) in pairs {
        let out: u64 = row.values().sum();
        model.handover.insert(
            from.to_string(),
            row.into_iter()
                .map(|(to, c)| (to.to_string(), c as f64 / out as f64))
                .collect(),
        );
    }
    model
}

/// Shortest daily window `[start, end)` (earliest on ties) holding at least
/// 95% of the events; `Always` when no window of at most 20 hours does.
pub fn detect_business_hours(log: &EventLog) -> BusinessHours {
    let mut hist = [0u64; 24];
    for e in log.events() {
        hist[hour_of_day(e.timestamp) as usize] += 1;
    }
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return BusinessHours::Always;
    }
    for len in 1..=BUSINESS_HOURS_MAX_SPAN {
        for start in 0..=(24 - len) {
            let covered: u64 = hist[start..start + len].iter().sum();
            if covered as f64 >= BUSINESS_HOURS_COVERAGE * total as f64 {
                return BusinessHours::weekdays(start as u8, (start + len) as u8);
            }
        }
    }
    BusinessHours::Always
}

/// Estimates every model parameter from the log.
pub fn enrich(tree: &ProcessTree, log: &EventLog) -> Result<EnrichedTree, EnrichError> {
    tree.validate()?;
    let dist = variants(log)?;
    let replays = replay_fitting(tree, &dist)?;
    let mut activity_stats = estimate_activity_stats(log);
    let orgs = discover_organizations(log);
    let OrganizationModel {
        mut organizations,
        mut activity_org,
        handover,
    } = orgs;
    for a in tree.activities() {
        activity_stats.entry(a.clone()).or_default();
        if let std::collections::btree_map::Entry::Vacant(slot) = activity_org.entry(a) {
            organizations.entry(DEFAULT_ORG.to_string()).or_insert_with(|| Organization {
                resources: BTreeSet::new(),
                capacity: log.len().max(1) as u32,
            });
            slot.insert(DEFAULT_ORG.to_string());
        }
    }
    // zero spread means simultaneous starts; use the timestamp resolution
    let arrival = estimate_arrival(log)?.max(0.001);
    let model = EnrichedTree {
        tree: tree.clone(),
        xor_weights: xor_weights_from(tree, &replays),
        loop_params: loop_params_from(tree, &replays),
        activity_stats,
        arrival,
        arrival_kind: ArrivalKind::Exponential,
        organizations,
        activity_org,
        handover,
        business_hours: detect_business_hours(log),
        process_capacity: None,
        interruptions: Vec::new(),
    };
    model.validate()?;
    Ok(model)
}

fn double_option<'de, D, T>(d: D) -> Result<Option<Option<T>>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Option::<T>::deserialize(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtreeReplacement {
    pub node_id: usize,
    pub tree: ProcessTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopPatch {
    pub redo_probability: Option<f64>,
    pub max_redos: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsPatch {
    pub mean_duration: Option<f64>,
    pub std_duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OrgPatch {
    pub capacity: Option<u32>,
    pub resources: Option<BTreeSet<String>>,
}

/// Sparse overrides of a model and of the simulation run settings.
///
/// Tree edits run first (whole `tree`, then `replace_subtrees` in order);
/// node ids in every other field refer to the resulting tree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParameterPatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree: Option<ProcessTree>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub replace_subtrees: Vec<SubtreeReplacement>,
    /// XOR node id → child index → weight; siblings are rescaled.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub xor_weights: BTreeMap<usize, BTreeMap<usize, f64>>,
    /// Weight of every choice edge leading to the named activity leaf.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub activity_weights: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub loop_params: BTreeMap<usize, LoopPatch>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub activity_stats: BTreeMap<String, StatsPatch>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_kind: Option<ArrivalKind>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub organizations: BTreeMap<String, OrgPatch>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub activity_org: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub handover: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub business_hours: Option<BusinessHours>,
    /// `null` clears the limit.
    #[serde(deserialize_with = "double_option", skip_serializing_if = "Option::is_none")]
    pub process_capacity: Option<Option<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interruptions: Option<Vec<Interruption>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub number_of_cases: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_time: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ParameterPatch {
    pub fn from_json(text: &str) -> Result<Self, EnrichError> {
        serde_json::from_str(text).map_err(|e| violation("patch JSON is well-formed", e.to_string()))
    }
}

/// Carries choice and loop parameters over to a new tree for every node
/// whose root path, operator and arity are unchanged; other nodes get
/// uniform weights and a loop that never redoes.
fn remap_parameters(old: &EnrichedTree, new_tree: &ProcessTree) -> (BTreeMap<usize, Vec<f64>>, BTreeMap<usize, LoopParams>) {
    let mut old_by_path: BTreeMap<Vec<usize>, (usize, Option<Operator>, usize)> = BTreeMap::new();
    for n in old.tree.nodes() {
        let path = old.tree.path_of(n.id).expect("node exists");
        old_by_path.insert(path, (n.id, n.node.op(), n.node.children().len()));
    }
    let mut xor = BTreeMap::new();
    let mut loops = BTreeMap::new();
    for n in new_tree.nodes() {
        let op = n.node.op();
        let arity = n.node.children().len();
        let path = new_tree.path_of(n.id).expect("node exists");
        let same = old_by_path
            .get(&path)
            .filter(|(_, o, k)| *o == op && *k == arity)
            .map(|(id, _, _)| *id);
        match op {
            Some(Operator::Xor) => {
                let w = same
                    .and_then(|id| old.xor_weights.get(&id).cloned())
                    .unwrap_or_else(|| vec![1.0 / arity as f64; arity]);
                xor.insert(n.id, w);
            }
            Some(Operator::Loop) => {
                let p = same.and_then(|id| old.loop_params.get(&id).copied()).unwrap_or_default();
                loops.insert(n.id, p);
            }
            _ => {}
        }
    }
    (xor, loops)
}

/// Sets the patched children of one choice and rescales the others so the
/// weights sum to 1.
fn reweight(weights: &mut [f64], patched: &BTreeMap<usize, f64>) {
    let fixed: f64 = patched.values().sum();
    let free: Vec<usize> = (0..weights.len()).filter(|i| !patched.contains_key(i)).collect();
    let remainder = 1.0 - fixed;
    for (&i, &w) in patched {
        weights[i] = w;
    }
    if free.is_empty() || remainder <= 0.0 {
        for &i in &free {
            weights[i] = 0.0;
        }
        if fixed > 0.0 {
            for w in weights.iter_mut() {
                *w /= fixed;
            }
        }
        return;
    }
    let previous: f64 = free.iter().map(|&i| weights[i]).sum();
    for &i in &free {
        weights[i] = if previous > 0.0 {
            weights[i] / previous * remainder
        } else {
            remainder / free.len() as f64
        };
    }
}

/// Applies a patch, returning a new validated model.
pub fn apply_patch(model: &EnrichedTree, patch: &ParameterPatch) -> Result<EnrichedTree, EnrichError> {
    let mut out = model.clone();

    let mut tree = model.tree.clone();
    if let Some(t) = &patch.tree {
        tree = t.clone();
    }
    for r in &patch.replace_subtrees {
        tree = tree
            .replace_node(r.node_id, r.tree.clone())
            .ok_or_else(|| EnrichError::UnknownTarget(format!("node {}", r.node_id)))?;
    }
    if tree != model.tree {
        tree.validate().map_err(|e| violation("tree is well-formed", e.to_string()))?;
        let (xor, loops) = remap_parameters(model, &tree);
        out.xor_weights = xor;
        out.loop_params = loops;
        out.tree = tree;
    }
    let nodes: Vec<(usize, Option<Operator>, usize)> = out
        .tree
        .nodes()
        .iter()
        .map(|n| (n.id, n.node.op(), n.node.children().len()))
        .collect();

    let mut xor_patches = patch.xor_weights.clone();
    for (activity, &w) in &patch.activity_weights {
        let mut found = false;
        for n in out.tree.nodes() {
            if n.node.op() != Some(Operator::Xor) {
                continue;
            }
            for (k, c) in n.node.children().iter().enumerate() {
                if c.label() == Some(activity.as_str()) {
                    xor_patches.entry(n.id).or_default().insert(k, w);
                    found = true;
                }
            }
        }
        if !found {
            return Err(EnrichError::UnknownTarget(format!("no choice edge to activity `{activity}`")));
        }
    }
    for (&id, children) in &xor_patches {
        match nodes.get(id) {
            Some((_, Some(Operator::Xor), arity)) => {
                if let Some(k) = children.keys().find(|&&k| k >= *arity) {
                    return Err(EnrichError::UnknownTarget(format!("child {k} of choice node {id}")));
                }
            }
            _ => return Err(EnrichError::UnknownTarget(format!("choice node {id}"))),
        }
        if children.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(violation("xor weight ≥ 0", format!("node {id}")));
        }
        let weights = out.xor_weights.get_mut(&id).expect("choice nodes have weights");
        reweight(weights, children);
    }

    for (&id, lp) in &patch.loop_params {
        if !matches!(nodes.get(id), Some((_, Some(Operator::Loop), _))) {
            return Err(EnrichError::UnknownTarget(format!("loop node {id}")));
        }
        let params = out.loop_params.entry(id).or_default();
        if let Some(p) = lp.redo_probability {
            params.redo_probability = p;
        }
        if let Some(m) = lp.max_redos {
            params.max_redos = m;
        }
    }

    let tree_activities = out.tree.activities();
    let known_activity = |a: &String, stats: &BTreeMap<String, ActivityStats>| tree_activities.contains(a) || stats.contains_key(a);
    for (a, sp) in &patch.activity_stats {
        if !known_activity(a, &out.activity_stats) {
            return Err(EnrichError::UnknownTarget(format!("activity `{a}`")));
        }
        let stats = out.activity_stats.entry(a.clone()).or_default();
        if let Some(m) = sp.mean_duration {
            stats.mean_duration = m;
        }
        if let Some(s) = sp.std_duration {
            stats.std_duration = s;
        }
    }

    if let Some(a) = patch.arrival {
        out.arrival = a;
    }
    if let Some(k) = patch.arrival_kind {
        out.arrival_kind = k;
    }

    for (name, op) in &patch.organizations {
        match out.organizations.get_mut(name) {
            Some(org) => {
                if let Some(c) = op.capacity {
                    org.capacity = c;
                }
                if let Some(r) = &op.resources {
                    org.resources = r.clone();
                }
            }
            None => {
                let capacity = op
                    .capacity
                    .ok_or_else(|| EnrichError::UnknownTarget(format!("organization `{name}` (new orgs need a capacity)")))?;
                out.organizations.insert(
                    name.clone(),
                    Organization {
                        resources: op.resources.clone().unwrap_or_default(),
                        capacity,
                    },
                );
            }
        }
    }

    for (a, o) in &patch.activity_org {
        if !known_activity(a, &out.activity_stats) {
            return Err(EnrichError::UnknownTarget(format!("activity `{a}`")));
        }
        if !out.organizations.contains_key(o) {
            return Err(EnrichError::UnknownTarget(format!("organization `{o}`")));
        }
        out.activity_org.insert(a.clone(), o.clone());
    }

    for (from, row) in &patch.handover {
        for to in row.keys().chain(std::iter::once(from)) {
            if !out.organizations.contains_key(to) {
                return Err(EnrichError::UnknownTarget(format!("organization `{to}`")));
            }
        }
        let target = out.handover.entry(from.clone()).or_default();
        for (to, &p) in row {
            target.insert(to.clone(), p);
        }
    }

    if let Some(bh) = &patch.business_hours {
        out.business_hours = bh.clone();
    }
    if let Some(pc) = patch.process_capacity {
        out.process_capacity = pc;
    }
    if let Some(i) = &patch.interruptions {
        out.interruptions = i.clone();
    }

    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_log::{Event, Trace};
    use crate::process_tree::parse;
    use proptest::prelude::*;

    fn log_of(items: &[(&[&str], usize)]) -> EventLog {
        EventLog::from_sequences(items.iter().map(|(t, c)| (t.to_vec(), *c)))
    }

    /// Builds a log from (case, activity, resource, seconds) rows.
    fn timed(rows: &[(&str, &str, &str, i64)]) -> EventLog {
        let mut cases: Vec<(String, Vec<Event>)> = Vec::new();
        for &(c, a, r, t) in rows {
            match cases.iter_mut().find(|(id, _)| id == c) {
                Some((_, evs)) => evs.push(Event::new(c, a, r, t * 1000)),
                None => cases.push((c.to_string(), vec![Event::new(c, a, r, t * 1000)])),
            }
        }
        EventLog::new(cases.into_iter().map(|(c, e)| Trace::new(c, e).unwrap()).collect()).unwrap()
    }

    #[test]
    fn xor_weights_seventy_thirty() {
        let tree = parse("->( a, X( b, c ) )").unwrap();
        let log = log_of(&[(&["a", "b"], 70), (&["a", "c"], 30)]);
        let w = estimate_xor_weights(&tree, &log).unwrap();
        assert_eq!(w[&2], vec![0.7, 0.3]);
    }

    #[test]
    fn unreached_choice_is_uniform() {
        let tree = parse("X( a, ->( b, X( c, d ) ) )").unwrap();
        let log = log_of(&[(&["a"], 4)]);
        let w = estimate_xor_weights(&tree, &log).unwrap();
        assert_eq!(w[&0], vec![1.0, 0.0]);
        assert_eq!(w[&4], vec![0.5, 0.5]);
    }

    #[test]
    fn half_of_decided_requests_rejected() {
        let tree = parse(
            "->( register request, *( ->( examine casually, decide ), reinitiate request ), X( reject request, pay compensation ) )",
        )
        .unwrap();
        let log = log_of(&[
            (&["register request", "examine casually", "decide", "reject request"], 5),
            (&["register request", "examine casually", "decide", "pay compensation"], 5),
        ]);
        let w = estimate_xor_weights(&tree, &log).unwrap();
        let xor = tree.nodes().iter().find(|n| n.node.op() == Some(Operator::Xor)).unwrap().id;
        let reject = TreeEdge {
            parent_id: xor,
            child_index: 0,
            child_activity: Some("reject request".into()),
        };
        assert_eq!(w[&xor][reject.child_index], 0.5);
    }

    #[test]
    fn no_fitting_traces() {
        let tree = parse("->( a, b )").unwrap();
        let log = log_of(&[(&["b", "a"], 3)]);
        assert!(matches!(estimate_xor_weights(&tree, &log), Err(EnrichError::NoFittingTraces)));
        assert!(matches!(estimate_loop_params(&tree, &log), Err(EnrichError::NoFittingTraces)));
    }

    #[test]
    fn loop_never_redone() {
        let tree = parse("->( *( a, b ), c )").unwrap();
        let p = estimate_loop_params(&tree, &log_of(&[(&["a", "c"], 5)])).unwrap();
        assert_eq!(p[&1], LoopParams { redo_probability: 0.0, max_redos: 1 });
    }

    #[test]
    fn loop_redo_counts_zero_zero_one_two() {
        let tree = parse("*( a, b )").unwrap();
        let log = log_of(&[(&["a"], 2), (&["a", "b", "a"], 1), (&["a", "b", "a", "b", "a"], 1)]);
        let p = estimate_loop_params(&tree, &log).unwrap();
        assert_eq!(p[&0].max_redos, 2);
        assert_eq!(p[&0].redo_probability, 3.0 / 7.0);
    }

    #[test]
    fn loop_redone_in_thirty_percent_of_executions() {
        let tree = parse("*( a, b )").unwrap();
        let log = log_of(&[(&["a"], 70), (&["a", "b", "a"], 30)]);
        let p = estimate_loop_params(&tree, &log).unwrap();
        assert_eq!(p[&0].max_redos, 1);
        // 30 redos over 130 body completions
        assert_eq!(p[&0].redo_probability, 30.0 / 130.0);
    }

    #[test]
    fn activity_stats_examples() {
        let s = estimate_activity_stats(&timed(&[("1", "a", "", 0), ("1", "b", "", 100)]));
        assert_eq!(s["a"], ActivityStats::default());
        assert_eq!(s["b"], ActivityStats { mean_duration: 100.0, std_duration: 0.0 });

        let s = estimate_activity_stats(&timed(&[
            ("1", "a", "", 0),
            ("1", "b", "", 100),
            ("2", "a", "", 0),
            ("2", "b", "", 300),
        ]));
        assert_eq!(s["b"], ActivityStats { mean_duration: 200.0, std_duration: 100.0 });

        let s = estimate_activity_stats(&timed(&[
            ("1", "start", "", 0),
            ("1", "register request", "", 43),
            ("2", "start", "", 0),
            ("2", "register request", "", 40),
            ("3", "start", "", 0),
            ("3", "register request", "", 46),
        ]));
        assert_eq!(s["register request"].mean_duration, 43.0);
    }

    #[test]
    fn arrival_examples() {
        let log = timed(&[("1", "a", "", 0), ("2", "a", "", 60), ("3", "a", "", 120)]);
        assert_eq!(estimate_arrival(&log).unwrap(), 60.0);
        let log = timed(&[("1", "a", "", 0), ("2", "a", "", 30), ("3", "a", "", 90)]);
        assert_eq!(estimate_arrival(&log).unwrap(), 45.0);
        let log = timed(&[("1", "a", "", 0)]);
        assert!(matches!(estimate_arrival(&log), Err(EnrichError::SingleCase)));
    }

    #[test]
    fn organizations_identical_resource_sets() {
        let log = timed(&[
            ("1", "a", "Pete", 0),
            ("1", "b", "Mike", 1),
            ("2", "a", "Mike", 0),
            ("2", "b", "Pete", 1),
        ]);
        let m = discover_organizations(&log);
        assert_eq!(m.organizations.len(), 1);
        let org = &m.organizations["org_1"];
        assert_eq!(org.capacity, 2);
        assert_eq!(m.activity_org["a"], m.activity_org["b"]);
    }

    #[test]
    fn organizations_forced_handover() {
        let log = timed(&[("1", "a", "Pete", 0), ("1", "b", "Sue", 1), ("2", "a", "Pete", 0), ("2", "b", "Sue", 1)]);
        let m = discover_organizations(&log);
        assert_eq!(m.organizations.len(), 2);
        let (oa, ob) = (&m.activity_org["a"], &m.activity_org["b"]);
        assert_ne!(oa, ob);
        assert_eq!(m.handover[oa][ob], 1.0);
    }

    #[test]
    fn customer_service_hands_over_to_inspectors() {
        let log = timed(&[
            ("1", "register request", "Pete", 0),
            ("1", "examine thoroughly", "Sue", 1),
            ("1", "reinitiate request", "Mike", 2),
            ("1", "examine thoroughly", "Sean", 3),
            ("2", "register request", "Mike", 0),
            ("2", "examine thoroughly", "Sean", 1),
            ("2", "reinitiate request", "Pete", 2),
            ("2", "examine thoroughly", "Sue", 3),
        ]);
        let m = discover_organizations(&log);
        let customer_service = &m.activity_org["register request"];
        assert_eq!(&m.activity_org["reinitiate request"], customer_service);
        let inspector = &m.activity_org["examine thoroughly"];
        assert_ne!(inspector, customer_service);
        assert_eq!(m.handover[customer_service][inspector], 1.0);
        assert_eq!(m.organizations[customer_service].capacity, 2);
    }

    #[test]
    fn resourceless_log_has_default_org() {
        let log = log_of(&[(&["a", "b"], 3)]);
        let m = discover_organizations(&log);
        assert_eq!(m.organizations.keys().collect::<Vec<_>>(), vec![DEFAULT_ORG]);
        assert_eq!(m.organizations[DEFAULT_ORG].capacity, 3);
        let model = enrich(&parse("->( a, b )").unwrap(), &log).unwrap();
        assert_eq!(model.organizations.len(), 1);
    }

    #[test]
    fn business_hours_from_weekday_office_log() {
        // 2021-03-01 was a Monday
        let monday = 1_614_556_800i64;
        let mut rows = Vec::new();
        let mut names = Vec::new();
        for day in 0..5 {
            for h in 9..17 {
                names.push(format!("{day}-{h}"));
                let t = monday + day * 86_400 + h * 3_600 + 600;
                rows.push((names.len() - 1, t));
            }
        }
        let owned: Vec<(String, i64)> = rows.iter().map(|(i, t)| (names[*i].clone(), *t)).collect();
        let borrowed: Vec<(&str, &str, &str, i64)> = owned.iter().map(|(c, t)| (c.as_str(), "a", "", *t)).collect();
        let log = timed(&borrowed);
        // histogram oracle: hours 9..16 carry 1/8 each, so no shorter window
        // reaches 95%
        let mut hist = [0usize; 24];
        for (_, t) in &owned {
            hist[((t % 86_400) / 3_600) as usize] += 1;
        }
        assert!((9..17).all(|h| hist[h] == 5));
        assert_eq!(detect_business_hours(&log), BusinessHours::weekdays(9, 17));

        let ids: Vec<String> = (0..24).map(|h| h.to_string()).collect();
        let rows: Vec<(&str, &str, &str, i64)> = ids.iter().enumerate().map(|(h, c)| (c.as_str(), "a", "", h as i64 * 3_600)).collect();
        assert_eq!(detect_business_hours(&timed(&rows)), BusinessHours::Always);
    }

    #[test]
    fn calendar_next_open() {
        let bh = BusinessHours::weekdays(9, 17);
        let monday = 1_614_556_800_000i64;
        let h = 3_600_000;
        assert_eq!(bh.next_open(monday + 10 * h), monday + 10 * h);
        assert_eq!(bh.next_open(monday + 8 * h), monday + 9 * h);
        assert_eq!(bh.next_open(monday + 17 * h), monday + 24 * h + 9 * h);
        // Friday evening → Monday morning
        let friday = monday + 4 * 24 * h;
        assert_eq!(bh.next_open(friday + 18 * h), monday + 7 * 24 * h + 9 * h);
        assert_eq!(weekday(monday), 0);
    }

    #[test]
    fn interruptions_delay_starts() {
        let mut model = enrich(&parse("->( a, b )").unwrap(), &log_of(&[(&["a", "b"], 3)])).unwrap();
        model.interruptions = vec![Interruption { start: 100, end: 200 }, Interruption { start: 150, end: 300 }];
        assert_eq!(model.next_start_allowed(50), 50);
        assert_eq!(model.next_start_allowed(120), 300);
    }

    fn bc_swap_model() -> EnrichedTree {
        let log = log_of(&[(&["a", "b", "c", "d"], 50), (&["a", "c", "b", "d"], 50)]);
        let tree = crate::discovery::discover(&log).unwrap();
        enrich(&tree, &log).unwrap()
    }

    #[test]
    fn enrich_bc_swap() {
        let m = bc_swap_model();
        for w in m.xor_weights.values() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        m.validate().unwrap();
        assert_eq!(EnrichedTree::from_json(&m.to_json()).unwrap(), m);
    }

    fn fig_one_model() -> EnrichedTree {
        let tree = parse("->( register request, X( reject request, pay compensation ) )").unwrap();
        let log = log_of(&[
            (&["register request", "reject request"], 6),
            (&["register request", "pay compensation"], 4),
        ]);
        enrich(&tree, &log).unwrap()
    }

    #[test]
    fn patch_renormalizes_siblings() {
        let m = fig_one_model();
        let patch = ParameterPatch {
            activity_weights: BTreeMap::from([("reject request".to_string(), 0.8)]),
            ..Default::default()
        };
        let p = apply_patch(&m, &patch).unwrap();
        assert_eq!(p.xor_weights[&2][0], 0.8);
        assert!((p.xor_weights[&2][1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn patch_makes_optional_activity_mandatory() {
        let tree = parse("->( submitted, X( tau, preaccepted ), X( declined, cancelled ) )").unwrap();
        let log = log_of(&[
            (&["submitted", "preaccepted", "declined"], 3),
            (&["submitted", "cancelled"], 2),
        ]);
        let m = enrich(&tree, &log).unwrap();
        let patch: ParameterPatch = serde_json::from_str(r#"{"replace_subtrees": [{"node_id": 2, "tree": "preaccepted"}]}"#).unwrap();
        let p = apply_patch(&m, &patch).unwrap();
        assert_eq!(p.tree.to_string(), "->( submitted, preaccepted, X( declined, cancelled ) )");
        // the surviving choice keeps its estimated weights under its new id
        assert_eq!(p.xor_weights.keys().collect::<Vec<_>>(), vec![&3]);
        assert_eq!(p.xor_weights[&3], m.xor_weights[&5]);
    }

    #[test]
    fn patch_unknown_targets() {
        let m = fig_one_model();
        let unknown_activity = ParameterPatch {
            activity_stats: BTreeMap::from([("nope".to_string(), StatsPatch { mean_duration: Some(1.0), std_duration: None })]),
            ..Default::default()
        };
        assert!(matches!(apply_patch(&m, &unknown_activity), Err(EnrichError::UnknownTarget(_))));
        let not_a_choice = ParameterPatch {
            xor_weights: BTreeMap::from([(0, BTreeMap::from([(0, 1.0)]))]),
            ..Default::default()
        };
        assert!(matches!(apply_patch(&m, &not_a_choice), Err(EnrichError::UnknownTarget(_))));
        let bad_node = ParameterPatch {
            replace_subtrees: vec![SubtreeReplacement { node_id: 99, tree: ProcessTree::Silent }],
            ..Default::default()
        };
        assert!(matches!(apply_patch(&m, &bad_node), Err(EnrichError::UnknownTarget(_))));
    }

    #[test]
    fn patch_negative_duration_names_invariant() {
        let m = fig_one_model();
        let patch = ParameterPatch {
            activity_stats: BTreeMap::from([(
                "reject request".to_string(),
                StatsPatch { mean_duration: Some(-5.0), std_duration: None },
            )]),
            ..Default::default()
        };
        match apply_patch(&m, &patch) {
            Err(EnrichError::InvariantViolation { invariant, .. }) => assert_eq!(invariant, "mean_duration ≥ 0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_new_activity_needs_stats_and_org() {
        let m = fig_one_model();
        let tree = parse("->( register request, X( reject request, pay compensation ), archive )").unwrap();
        let bare = ParameterPatch {
            tree: Some(tree.clone()),
            ..Default::default()
        };
        assert!(matches!(apply_patch(&m, &bare), Err(EnrichError::InvariantViolation { .. })));
        let full = ParameterPatch {
            tree: Some(tree),
            activity_stats: BTreeMap::from([("archive".to_string(), StatsPatch { mean_duration: Some(60.0), std_duration: None })]),
            organizations: BTreeMap::from([("records".to_string(), OrgPatch { capacity: Some(1), resources: None })]),
            activity_org: BTreeMap::from([("archive".to_string(), "records".to_string())]),
            ..Default::default()
        };
        let p = apply_patch(&m, &full).unwrap();
        assert_eq!(p.activity_org["archive"], "records");
        assert_eq!(p.xor_weights[&2], m.xor_weights[&2]);
    }

    #[test]
    fn patch_process_capacity_null_clears() {
        let mut m = fig_one_model();
        m.process_capacity = Some(3);
        let clear = ParameterPatch::from_json(r#"{"process_capacity": null}"#).unwrap();
        assert_eq!(apply_patch(&m, &clear).unwrap().process_capacity, None);
        let keep = ParameterPatch::from_json("{}").unwrap();
        assert_eq!(apply_patch(&m, &keep).unwrap().process_capacity, Some(3));
        assert!(ParameterPatch::from_json(r#"{"colour": 1}"#).is_err());
    }

    /// Two-pass mean and population deviation.
    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn stats_match_two_pass_oracle(traces in prop::collection::vec(prop::collection::vec((0u8..4, 0i64..100_000), 1..8), 1..30)) {
            let mut built = Vec::new();
            let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (i, t) in traces.iter().enumerate() {
                let id = i.to_string();
                let mut now = 0i64;
                let mut events = Vec::new();
                for (k, (a, gap)) in t.iter().enumerate() {
                    now += gap;
                    let name = format!("a{a}");
                    if k > 0 {
                        samples.entry(name.clone()).or_default().push(*gap as f64 / 1000.0);
                    }
                    events.push(Event::new(id.clone(), name, "", now));
                }
                built.push(Trace::new(id, events).unwrap());
            }
            let log = EventLog::new(built).unwrap();
            let stats = estimate_activity_stats(&log);
            for (a, s) in &stats {
                match samples.get(a) {
                    Some(xs) => {
                        let (m, sd) = two_pass(xs);
                        prop_assert!(close(s.mean_duration, m));
                        prop_assert!(close(s.std_duration, sd));
                    }
                    None => prop_assert_eq!(*s, ActivityStats::default()),
                }
            }
        }

        #[test]
        fn patch_is_idempotent(w in 0.0f64..1.0, mean in -10.0f64..100.0, cap in 0u32..4) {
            let m = fig_one_model();
            let patch = ParameterPatch {
                xor_weights: BTreeMap::from([(2, BTreeMap::from([(1, w)]))]),
                activity_stats: BTreeMap::from([("register request".to_string(), StatsPatch { mean_duration: Some(mean), std_duration: None })]),
                organizations: BTreeMap::from([(DEFAULT_ORG.to_string(), OrgPatch { capacity: Some(cap), resources: None })]),
                ..Default::default()
            };
            match apply_patch(&m, &patch) {
                Ok(once) => {
                    once.validate().unwrap();
                    let twice = apply_patch(&once, &patch).unwrap();
                    prop_assert_eq!(&once.tree, &twice.tree);
                    for (id, ws) in &once.xor_weights {
                        for (x, y) in ws.iter().zip(&twice.xor_weights[id]) {
                            prop_assert!((x - y).abs() <= 1e-12);
                        }
                    }
                    prop_assert_eq!(&once.activity_stats, &twice.activity_stats);
                    prop_assert_eq!(&once.organizations, &twice.organizations);
                }
                Err(EnrichError::InvariantViolation { .. }) => prop_assert!(mean < 0.0 || cap == 0),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }
}
